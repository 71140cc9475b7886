use amskv_core::attn::inter_scale_similarity;
use amskv_core::cache::{AllocStrategy, PolicyKind};
use amskv_core::kernel::{bilinear_resize, seeded_init, Distribution, Matrix, SpatialMap};
use amskv_core::schedule::ScaleGroup;
use amskv_core::trace::{replay, verify_trace};
use amskv_core::{
    derive_budgets, generate, init_model, BudgetRule, BudgetSpec, GenerateOptions, GenerationTrace,
    ScaleSchedule, ThetaMode, ToyModelConfig,
};

fn config(sides: Vec<usize>, seed: u64) -> ToyModelConfig {
    ToyModelConfig {
        n_layers: 2,
        n_heads: 2,
        head_dim: 4,
        vocab_size: 32,
        schedule: ScaleSchedule::new(sides).unwrap(),
        seed,
    }
}

fn all_policies() -> Vec<PolicyKind> {
    vec![
        PolicyKind::AmsKv,
        PolicyKind::FullCache,
        PolicyKind::SlidingWindow { window: 174 },
        PolicyKind::SinkWindow {
            sink: 5,
            window: 169,
        },
        PolicyKind::StaticAlloc {
            strategy: AllocStrategy::S1Uniform,
            large_fraction: 0.5,
        },
        PolicyKind::StaticAlloc {
            strategy: AllocStrategy::S2Similarity,
            large_fraction: 0.5,
        },
        PolicyKind::Ablation {
            drop: ScaleGroup::Condensed,
        },
        PolicyKind::Ablation {
            drop: ScaleGroup::Local,
        },
        PolicyKind::Ablation {
            drop: ScaleGroup::Intermediate,
        },
    ]
}

#[test]
fn identical_runs_serialize_identically() {
    let cfg = config(vec![1, 2, 3, 4, 5], 21);
    let spec = derive_budgets(&cfg.schedule, &BudgetRule::Default).unwrap();
    let run = || {
        let model = init_model(&cfg).unwrap();
        generate(
            &model,
            PolicyKind::AmsKv,
            &spec,
            &GenerateOptions::new().with_oracle(),
        )
        .unwrap()
        .to_jsonl()
        .unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn full_cache_has_zero_error_against_oracle() {
    let cfg = config(ScaleSchedule::var_default().sides().to_vec(), 2);
    let model = init_model(&cfg).unwrap();
    let spec = derive_budgets(&cfg.schedule, &BudgetRule::Default).unwrap();
    let t = generate(
        &model,
        PolicyKind::FullCache,
        &spec,
        &GenerateOptions::new().with_oracle(),
    )
    .unwrap();
    for f in t.fidelity().unwrap().per_scale {
        assert_eq!(f.rel_l2, 0.0);
        assert_eq!(f.max_attention_abs_diff, 0.0);
    }
    assert_eq!(t.steps.last().unwrap().cached_tokens, 680);
}

#[test]
fn degenerate_budget_is_bitwise_full_cache() {
    let cfg = config(ScaleSchedule::var_default().sides().to_vec(), 8);
    let model = init_model(&cfg).unwrap();
    let total = cfg.schedule.total_tokens();
    let spec = BudgetSpec {
        c_min: total,
        c_max: total,
        condensed_count: 2,
        theta: ThetaMode::default(),
    };
    let opts = GenerateOptions::new().with_oracle();
    let a = generate(&model, PolicyKind::AmsKv, &spec, &opts).unwrap();
    let f = generate(&model, PolicyKind::FullCache, &spec, &opts).unwrap();
    let tokens = |t: &GenerationTrace| {
        t.scales
            .iter()
            .map(|s| s.tokens.clone())
            .collect::<Vec<_>>()
    };
    assert_eq!(tokens(&a), tokens(&f));
    assert!(a
        .fidelity()
        .unwrap()
        .per_scale
        .iter()
        .all(|s| s.rel_l2 == 0.0));
}

#[test]
fn every_policy_produces_a_valid_replayable_trace() {
    let cfg = config(ScaleSchedule::var_default().sides().to_vec(), 5);
    let model = init_model(&cfg).unwrap();
    let spec = derive_budgets(&cfg.schedule, &BudgetRule::Default).unwrap();
    let mut shapes = None;
    for policy in all_policies() {
        let t = generate(&model, policy, &spec, &GenerateOptions::new()).unwrap();
        verify_trace(&t).unwrap();
        let back = GenerationTrace::from_jsonl(&t.to_jsonl().unwrap()).unwrap();
        assert_eq!(back, t);
        replay(&back).unwrap();
        let s: Vec<(usize, usize)> = t.scales.iter().map(|s| (s.side, s.tokens.len())).collect();
        match &shapes {
            None => shapes = Some(s),
            Some(prev) => assert_eq!(prev, &s, "{}", policy.label()),
        }
    }
}

#[test]
fn windowed_policies_deviate_from_oracle_only_after_eviction() {
    let cfg = config(ScaleSchedule::var_default().sides().to_vec(), 13);
    let model = init_model(&cfg).unwrap();
    let spec = derive_budgets(&cfg.schedule, &BudgetRule::Default).unwrap();
    let t = generate(
        &model,
        PolicyKind::SlidingWindow { window: 174 },
        &spec,
        &GenerateOptions::new().with_oracle(),
    )
    .unwrap();
    let fid = t.fidelity().unwrap();
    // scales 1..=7 sum to 155 tokens, all retained
    for f in &fid.per_scale[..7] {
        assert_eq!(f.rel_l2, 0.0, "scale {}", f.scale);
    }
    assert!(fid.per_scale[9].rel_l2 > 0.0);
}

/// Mean of a chi variable with `n` degrees of freedom, by the recurrence
/// `c(n + 1) = n / c(n)` from `c(1) = sqrt(2 / pi)`.
fn chi_mean(n: usize) -> f64 {
    let mut c = (2.0 / std::f64::consts::PI).sqrt();
    for k in 1..n {
        c = k as f64 / c;
    }
    c
}

#[test]
fn similarity_under_gaussian_noise_matches_chi_mean() {
    let (prev_side, side, heads, hd) = (2, 4, 2, 4);
    let sigma = 0.3;
    let prev: Vec<Matrix> = (0..heads)
        .map(|h| {
            seeded_init(
                100 + h as u64,
                prev_side * prev_side,
                hd,
                Distribution::Gaussian,
            )
        })
        .collect();
    let up: Vec<Matrix> = prev
        .iter()
        .map(|p| {
            bilinear_resize(
                &SpatialMap::from_tokens(p, prev_side, prev_side).unwrap(),
                side,
                side,
            )
            .unwrap()
            .into_tokens()
        })
        .collect();
    let n = heads * side * side * hd;
    let trials = 2000;
    let mut sum = 0.0;
    for t in 0..trials {
        let noisy: Vec<Matrix> = up
            .iter()
            .enumerate()
            .map(|(h, u)| {
                let noise = seeded_init(
                    7_000 + (t * heads + h) as u64,
                    u.rows(),
                    u.cols(),
                    Distribution::Gaussian,
                );
                let data = u
                    .data()
                    .iter()
                    .zip(noise.data())
                    .map(|(a, e)| a + sigma * e)
                    .collect();
                Matrix::new(u.rows(), u.cols(), data).unwrap()
            })
            .collect();
        sum += inter_scale_similarity(&noisy, side, &prev, prev_side)
            .unwrap()
            .score;
    }
    let mean = sum / trials as f64;
    let expected = -sigma * chi_mean(n);
    // standard error of the mean is about sigma * 0.71 / sqrt(trials)
    assert!(
        (mean - expected).abs() < 0.03,
        "mean {mean}, expected {expected}"
    );
    let rough = -sigma * (n as f64).sqrt();
    assert!((mean - rough).abs() / rough.abs() < 0.01);
}
