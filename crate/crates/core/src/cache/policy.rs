//! Baseline and ablation policies next to the adaptive one, behind a single
//! per-layer [`PolicyCache`].

use serde::{Deserialize, Serialize};

use crate::cache::{
    demanding_count, quantile_threshold, CacheDecision, DecisionKind, LayerCache, ScaleBlock,
};
use crate::error::{Error, Result};
use crate::schedule::{scale_groups, BudgetSpec, ScaleGroup, ScaleSchedule, ThetaMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AllocStrategy {
    /// Large caches evenly spaced over depth.
    #[serde(rename = "s1")]
    S1Uniform,
    /// Large caches on the layers with the lowest inter-scale similarity.
    #[serde(rename = "s2")]
    S2Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicyKind {
    AmsKv,
    FullCache,
    /// Most recent `window` tokens, whole scales, nothing pinned.
    SlidingWindow {
        window: usize,
    },
    /// Leading scales up to `sink` tokens pinned, sliding window over the rest.
    SinkWindow {
        sink: usize,
        window: usize,
    },
    /// Fixed per-layer budgets: `C_max` on `large_fraction` of the layers,
    /// `C_min` elsewhere.
    StaticAlloc {
        strategy: AllocStrategy,
        large_fraction: f64,
    },
    /// Full cache with one scale group hidden at read time.
    Ablation {
        drop: ScaleGroup,
    },
}

impl PolicyKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PolicyKind::SlidingWindow { window: 0 } => {
                Err(Error::Config("sliding-window needs window > 0".into()))
            }
            PolicyKind::SinkWindow { sink, window } if sink == 0 || window == 0 => Err(
                Error::Config("sink-window needs sink > 0 and window > 0".into()),
            ),
            PolicyKind::StaticAlloc { large_fraction, .. }
                if !(large_fraction > 0.0 && large_fraction <= 1.0) =>
            {
                Err(Error::Config(format!(
                    "static-alloc large_fraction must lie in (0, 1], got {large_fraction}"
                )))
            }
            _ => Ok(()),
        }
    }

    /// Short name used for file names and table rows.
    pub fn label(&self) -> String {
        match self {
            PolicyKind::AmsKv => "ams-kv".into(),
            PolicyKind::FullCache => "full-cache".into(),
            PolicyKind::SlidingWindow { window } => format!("sliding-window-{window}"),
            PolicyKind::SinkWindow { sink, window } => format!("sink-window-{sink}-{window}"),
            PolicyKind::StaticAlloc {
                strategy: AllocStrategy::S1Uniform,
                ..
            } => "static-s1".into(),
            PolicyKind::StaticAlloc {
                strategy: AllocStrategy::S2Similarity,
                ..
            } => "static-s2".into(),
            PolicyKind::Ablation { drop } => format!("drop-{}", drop.as_str()),
        }
    }

    pub fn needs_similarity_ranking(&self) -> bool {
        matches!(
            self,
            PolicyKind::StaticAlloc {
                strategy: AllocStrategy::S2Similarity,
                ..
            }
        )
    }
}

/// Everything needed to build and re-check the caches of every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetSetup {
    pub policy: PolicyKind,
    pub spec: BudgetSpec,
    pub schedule: ScaleSchedule,
    pub n_layers: usize,
    pub n_local: usize,
    /// Layers given `C_max` under static allocation.
    #[serde(default)]
    pub large_layers: Vec<usize>,
}

impl FleetSetup {
    pub fn new(
        policy: PolicyKind,
        spec: BudgetSpec,
        schedule: ScaleSchedule,
        n_layers: usize,
        n_local: usize,
    ) -> Result<Self> {
        policy.validate()?;
        spec.validate(&schedule)?;
        if n_layers == 0 {
            return Err(Error::Config("fleet needs at least one layer".into()));
        }
        let large_layers = match policy {
            PolicyKind::StaticAlloc {
                strategy: AllocStrategy::S1Uniform,
                large_fraction,
            } => uniform_layers(n_layers, large_fraction),
            _ => Vec::new(),
        };
        Ok(Self {
            policy,
            spec,
            schedule,
            n_layers,
            n_local,
            large_layers,
        })
    }

    /// Assigns the large layers of an S2 allocation from per-layer
    /// similarity scores (lower = less similar).
    pub fn with_similarity_ranking(mut self, layer_scores: &[f64]) -> Result<Self> {
        let PolicyKind::StaticAlloc { large_fraction, .. } = self.policy else {
            return Err(Error::Config(
                "similarity ranking only applies to static-alloc".into(),
            ));
        };
        if layer_scores.len() != self.n_layers {
            return Err(Error::Config(format!(
                "{} layer scores for {} layers",
                layer_scores.len(),
                self.n_layers
            )));
        }
        let n = demanding_count(self.n_layers, large_fraction);
        let mut order: Vec<usize> = (0..self.n_layers).collect();
        order.sort_by(|&a, &b| layer_scores[a].total_cmp(&layer_scores[b]).then(a.cmp(&b)));
        let mut large = order[..n].to_vec();
        large.sort_unstable();
        self.large_layers = large;
        Ok(self)
    }

    pub fn build<B: ScaleBlock>(&self) -> Vec<PolicyCache<B>> {
        (0..self.n_layers).map(|l| self.layer_cache(l)).collect()
    }

    pub fn layer_cache<B: ScaleBlock>(&self, layer: usize) -> PolicyCache<B> {
        match self.policy {
            PolicyKind::AmsKv => PolicyCache::Adaptive(LayerCache::new(layer, &self.spec)),
            PolicyKind::FullCache => PolicyCache::Full(AppendOnly::default()),
            PolicyKind::SlidingWindow { window } => {
                PolicyCache::Window(WindowCache::new(0, window))
            }
            PolicyKind::SinkWindow { sink, window } => {
                PolicyCache::Window(WindowCache::new(sink, window))
            }
            PolicyKind::StaticAlloc { .. } => {
                let budget = if self.large_layers.contains(&layer) {
                    self.spec.c_max
                } else {
                    self.spec.c_min
                };
                PolicyCache::Adaptive(LayerCache::fixed(layer, budget, self.spec.condensed_count))
            }
            PolicyKind::Ablation { drop } => PolicyCache::Ablation {
                store: AppendOnly::default(),
                drop,
                condensed_count: self.spec.condensed_count,
                n_local: self.n_local,
                schedule: self.schedule.clone(),
            },
        }
    }

    /// Per-layer token budget the policy nominally targets.
    pub fn nominal_budget(&self) -> usize {
        match self.policy {
            PolicyKind::AmsKv | PolicyKind::StaticAlloc { .. } => self.spec.c_max,
            PolicyKind::SlidingWindow { window } => window,
            PolicyKind::SinkWindow { sink, window } => sink + window,
            PolicyKind::FullCache | PolicyKind::Ablation { .. } => self.schedule.total_tokens(),
        }
    }

    /// Threshold in force at one scale, given every layer's similarity.
    /// `None` until all layers have a score.
    pub fn resolve_theta(&self, similarities: &[Option<f64>]) -> Option<f64> {
        match self.spec.theta {
            ThetaMode::Absolute { value } => Some(value),
            ThetaMode::Quantile { rho } => {
                let scores: Option<Vec<f64>> = similarities.iter().copied().collect();
                scores.map(|s| quantile_threshold(&s, rho))
            }
        }
    }
}

/// Evenly spaced layer indices `floor(j * n_layers / n_large)`.
fn uniform_layers(n_layers: usize, fraction: f64) -> Vec<usize> {
    let n = demanding_count(n_layers, fraction).max(1);
    (0..n).map(|j| j * n_layers / n).collect()
}

#[derive(Debug, Clone)]
pub struct AppendOnly<B> {
    blocks: Vec<B>,
    next_scale: usize,
}

impl<B> Default for AppendOnly<B> {
    fn default() -> Self {
        Self {
            blocks: Vec::new(),
            next_scale: 1,
        }
    }
}

impl<B: ScaleBlock> AppendOnly<B> {
    fn push(&mut self, block: B) -> Result<()> {
        check_order(&mut self.next_scale, block.scale())?;
        self.blocks.push(block);
        Ok(())
    }
}

/// Whole-scale sliding window with an optional pinned prefix.
#[derive(Debug, Clone)]
pub struct WindowCache<B> {
    blocks: Vec<B>,
    pinned: usize,
    pinned_tokens: usize,
    pinning: bool,
    sink: usize,
    window: usize,
    next_scale: usize,
}

impl<B: ScaleBlock> WindowCache<B> {
    pub fn new(sink: usize, window: usize) -> Self {
        Self {
            blocks: Vec::new(),
            pinned: 0,
            pinned_tokens: 0,
            pinning: true,
            sink,
            window,
            next_scale: 1,
        }
    }

    /// Tokens actually pinned, i.e. `sink` rounded down to whole scales.
    pub fn pinned_tokens(&self) -> usize {
        self.pinned_tokens
    }

    fn step(&mut self, block: B) -> Result<DecisionKind> {
        check_order(&mut self.next_scale, block.scale())?;
        let t = block.tokens();
        if self.pinning && self.pinned_tokens + t <= self.sink {
            self.blocks.insert(self.pinned, block);
            self.pinned += 1;
            self.pinned_tokens += t;
            return Ok(DecisionKind::Cached);
        }
        self.pinning = false;
        self.blocks.push(block);
        let mut recent: usize = self.blocks[self.pinned..]
            .iter()
            .map(ScaleBlock::tokens)
            .sum();
        let mut evicted = Vec::new();
        while recent > self.window {
            let b = self.blocks.remove(self.pinned);
            recent -= b.tokens();
            evicted.push(b.scale());
        }
        Ok(if evicted.is_empty() {
            DecisionKind::Cached
        } else {
            DecisionKind::CachedWithEviction { evicted }
        })
    }
}

fn check_order(next: &mut usize, scale: usize) -> Result<()> {
    if scale != *next {
        return Err(Error::Protocol(format!(
            "expected scale {next}, got {scale}"
        )));
    }
    *next += 1;
    Ok(())
}

/// One layer's cache under any policy.
#[derive(Debug, Clone)]
pub enum PolicyCache<B> {
    Adaptive(LayerCache<B>),
    Full(AppendOnly<B>),
    Window(WindowCache<B>),
    Ablation {
        store: AppendOnly<B>,
        drop: ScaleGroup,
        condensed_count: usize,
        n_local: usize,
        schedule: ScaleSchedule,
    },
}

impl<B: ScaleBlock> PolicyCache<B> {
    pub fn blocks(&self) -> &[B] {
        match self {
            PolicyCache::Adaptive(c) => c.blocks(),
            PolicyCache::Full(s) | PolicyCache::Ablation { store: s, .. } => &s.blocks,
            PolicyCache::Window(w) => &w.blocks,
        }
    }

    pub fn cached_tokens(&self) -> usize {
        self.blocks().iter().map(ScaleBlock::tokens).sum()
    }

    pub fn cached_scales(&self) -> Vec<usize> {
        self.blocks().iter().map(ScaleBlock::scale).collect()
    }

    /// Live token budget, `None` for unbounded policies.
    pub fn budget(&self) -> Option<usize> {
        match self {
            PolicyCache::Adaptive(c) => Some(c.budget()),
            PolicyCache::Window(w) => Some(w.sink + w.window),
            PolicyCache::Full(_) | PolicyCache::Ablation { .. } => None,
        }
    }

    /// Blocks attended to while generating `current`: the cache as it stood
    /// before this step, followed by the current scale.
    pub fn context<'a>(&'a self, current: &'a B) -> Vec<&'a B> {
        let mut ctx: Vec<&B> = match self {
            PolicyCache::Ablation {
                store,
                drop,
                condensed_count,
                n_local,
                schedule,
            } => {
                let groups = scale_groups(schedule, current.scale(), *condensed_count, *n_local);
                store
                    .blocks
                    .iter()
                    .filter(|b| !groups.contains(*drop, b.scale()))
                    .collect()
            }
            _ => self.blocks().iter().collect(),
        };
        ctx.push(current);
        ctx
    }

    /// Stores (or declines) the block just generated.
    pub fn commit(
        &mut self,
        block: B,
        similarity: Option<f64>,
        theta: f64,
    ) -> Result<CacheDecision> {
        let kind = match self {
            PolicyCache::Adaptive(c) => return c.step(block, similarity, theta),
            PolicyCache::Full(s) | PolicyCache::Ablation { store: s, .. } => {
                s.push(block)?;
                DecisionKind::Cached
            }
            PolicyCache::Window(w) => w.step(block)?,
        };
        Ok(CacheDecision {
            kind,
            sim_score: similarity,
        })
    }

    pub fn expanded_at(&self) -> Option<usize> {
        match self {
            PolicyCache::Adaptive(c) => c.expanded_at(),
            _ => None,
        }
    }
}

/// Free-function form of [`PolicyCache::context`].
pub fn context_view<'a, B: ScaleBlock>(cache: &'a PolicyCache<B>, current: &'a B) -> Vec<&'a B> {
    cache.context(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::BlockShape;
    use crate::schedule::{derive_budgets, BudgetRule};

    fn setup(policy: PolicyKind, sides: &[usize]) -> FleetSetup {
        let schedule = ScaleSchedule::new(sides.to_vec()).unwrap();
        let spec = derive_budgets(&schedule, &BudgetRule::Default).unwrap_or(BudgetSpec {
            c_min: schedule.total_tokens(),
            c_max: schedule.total_tokens(),
            condensed_count: 1,
            theta: ThetaMode::default(),
        });
        FleetSetup::new(policy, spec, schedule, 2, 2).unwrap()
    }

    fn run(
        setup: &FleetSetup,
        theta: f64,
        sim: f64,
    ) -> (PolicyCache<BlockShape>, Vec<DecisionKind>) {
        let mut c = setup.layer_cache(0);
        let kinds = setup
            .schedule
            .sides()
            .iter()
            .enumerate()
            .map(|(i, &side)| {
                let s = (i > 0).then_some(sim);
                c.commit(BlockShape { scale: i + 1, side }, s, theta)
                    .unwrap()
                    .kind
            })
            .collect();
        (c, kinds)
    }

    fn ctx_tokens(c: &PolicyCache<BlockShape>, cur: BlockShape) -> usize {
        c.context(&cur).iter().map(|b| b.tokens()).sum()
    }

    #[test]
    fn full_cache_keeps_everything() {
        let (c, _) = run(&setup(PolicyKind::FullCache, &[1, 2, 3]), 0.0, 0.0);
        assert_eq!(c.cached_tokens(), 14);
    }

    #[test]
    fn sliding_window_rolls_whole_scales() {
        let (c, kinds) = run(
            &setup(PolicyKind::SlidingWindow { window: 13 }, &[1, 2, 3]),
            0.0,
            0.0,
        );
        assert_eq!(c.cached_scales(), vec![2, 3]);
        assert_eq!(c.cached_tokens(), 13);
        assert_eq!(
            kinds[2],
            DecisionKind::CachedWithEviction { evicted: vec![1] }
        );
    }

    #[test]
    fn sink_window_pins_prefix() {
        let s = setup(
            PolicyKind::SinkWindow {
                sink: 5,
                window: 169,
            },
            &ScaleSchedule::VAR_DEFAULT,
        );
        let (c, _) = run(&s, 0.0, 0.0);
        assert_eq!(c.cached_scales(), vec![1, 2]);
        // 256 > window, so the last scale rolls out immediately
        let s = setup(
            PolicyKind::SinkWindow {
                sink: 6,
                window: 300,
            },
            &ScaleSchedule::VAR_DEFAULT,
        );
        let (c, _) = run(&s, 0.0, 0.0);
        assert_eq!(c.cached_scales(), vec![1, 2, 10]);
        if let PolicyCache::Window(w) = &c {
            assert_eq!(w.pinned_tokens(), 5);
        }
    }

    #[test]
    fn ablation_hides_group_at_read_time() {
        let s = setup(
            PolicyKind::Ablation {
                drop: ScaleGroup::Intermediate,
            },
            &ScaleSchedule::VAR_DEFAULT,
        );
        let mut c: PolicyCache<BlockShape> = s.layer_cache(0);
        for (i, &side) in s.schedule.sides()[..9].iter().enumerate() {
            c.commit(BlockShape { scale: i + 1, side }, Some(0.0), 0.0)
                .unwrap();
        }
        let cur = BlockShape {
            scale: 10,
            side: 16,
        };
        let ctx: Vec<usize> = c.context(&cur).iter().map(|b| b.scale).collect();
        assert_eq!(ctx, vec![1, 2, 8, 9, 10]);
        assert_eq!(c.cached_tokens(), 424);
    }

    #[test]
    fn context_view_final_scale() {
        let s = setup(PolicyKind::AmsKv, &ScaleSchedule::VAR_DEFAULT);
        let mut c: PolicyCache<BlockShape> = s.layer_cache(0);
        for (i, &side) in s.schedule.sides()[..9].iter().enumerate() {
            c.commit(BlockShape { scale: i + 1, side }, Some(0.0), -1.0)
                .unwrap();
        }
        assert_eq!(
            ctx_tokens(
                &c,
                BlockShape {
                    scale: 10,
                    side: 16
                }
            ),
            430
        );

        let empty: PolicyCache<BlockShape> = s.layer_cache(0);
        assert_eq!(ctx_tokens(&empty, BlockShape { scale: 1, side: 1 }), 1);

        let f = setup(PolicyKind::FullCache, &ScaleSchedule::VAR_DEFAULT);
        let mut c: PolicyCache<BlockShape> = f.layer_cache(0);
        for (i, &side) in f.schedule.sides()[..9].iter().enumerate() {
            c.commit(BlockShape { scale: i + 1, side }, None, 0.0)
                .unwrap();
        }
        assert_eq!(
            ctx_tokens(
                &c,
                BlockShape {
                    scale: 10,
                    side: 16
                }
            ),
            680
        );
    }

    #[test]
    fn static_allocation_layers() {
        let policy = PolicyKind::StaticAlloc {
            strategy: AllocStrategy::S1Uniform,
            large_fraction: 1.0 / 6.0,
        };
        let schedule = ScaleSchedule::var_default();
        let spec = derive_budgets(&schedule, &BudgetRule::Default).unwrap();
        let s = FleetSetup::new(policy, spec, schedule.clone(), 30, 2).unwrap();
        assert_eq!(s.large_layers, vec![0, 6, 12, 18, 24]);

        let policy = PolicyKind::StaticAlloc {
            strategy: AllocStrategy::S2Similarity,
            large_fraction: 1.0 / 6.0,
        };
        let s = FleetSetup::new(policy, spec, schedule, 6, 2)
            .unwrap()
            .with_similarity_ranking(&[-1.0, -2.0, -9.0, -4.0, -5.0, -3.0])
            .unwrap();
        assert_eq!(s.large_layers, vec![2]);
        let caches: Vec<PolicyCache<BlockShape>> = s.build();
        assert_eq!(caches[2].budget(), Some(430));
        assert_eq!(caches[0].budget(), Some(174));
    }

    #[test]
    fn policy_validation() {
        assert!(PolicyKind::SlidingWindow { window: 0 }.validate().is_err());
        assert!(PolicyKind::SinkWindow { sink: 0, window: 3 }
            .validate()
            .is_err());
        assert!(PolicyKind::StaticAlloc {
            strategy: AllocStrategy::S1Uniform,
            large_fraction: 0.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn policy_kind_serde_shape() {
        let json = serde_json::to_string(&PolicyKind::SinkWindow {
            sink: 5,
            window: 100,
        })
        .unwrap();
        assert_eq!(json, r#"{"kind":"sink-window","sink":5,"window":100}"#);
        let back: PolicyKind =
            serde_json::from_str(r#"{"kind":"ablation","drop":"local"}"#).unwrap();
        assert_eq!(
            back,
            PolicyKind::Ablation {
                drop: ScaleGroup::Local
            }
        );
    }
}
