use amskv_bench::{fleet, similarity_stream, toy_model};
use amskv_core::cache::{simulate, validate_records, AllocStrategy};
use amskv_core::schedule::ScaleGroup;
use amskv_core::{derive_budgets, generate, init_model, BudgetRule, GenerateOptions, PolicyKind};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn size_only(c: &mut Criterion) {
    let n_layers = 30;
    let sims = similarity_stream(n_layers);
    let mut group = c.benchmark_group("size-only fleet of 30 layers");
    for policy in [
        PolicyKind::AmsKv,
        PolicyKind::FullCache,
        PolicyKind::SinkWindow {
            sink: 5,
            window: 169,
        },
        PolicyKind::StaticAlloc {
            strategy: AllocStrategy::S1Uniform,
            large_fraction: 1.0 / 6.0,
        },
        PolicyKind::Ablation {
            drop: ScaleGroup::Intermediate,
        },
    ] {
        let setup = fleet(policy, n_layers);
        group.bench_with_input(
            BenchmarkId::new("simulate", policy.label()),
            &setup,
            |b, s| b.iter(|| simulate(black_box(s), &sims).unwrap()),
        );
    }
    let setup = fleet(PolicyKind::AmsKv, n_layers);
    let recs = simulate(&setup, &sims).unwrap();
    group.bench_function("validate ams-kv", |b| {
        b.iter(|| validate_records(&setup, black_box(&recs)).unwrap())
    });
    group.finish();
}

fn end_to_end(c: &mut Criterion) {
    let cfg = toy_model(4);
    let model = init_model(&cfg).unwrap();
    let spec = derive_budgets(&cfg.schedule, &BudgetRule::Default).unwrap();
    let mut group = c.benchmark_group("toy generation, 4 layers");
    group.sample_size(10);
    for policy in [PolicyKind::FullCache, PolicyKind::AmsKv] {
        group.bench_function(policy.label(), |b| {
            b.iter(|| generate(&model, policy, &spec, &GenerateOptions::new()).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, size_only, end_to_end);
criterion_main!(benches);
