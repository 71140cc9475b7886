//! Scale-schedule arithmetic: token counts, scale groups, budget derivation
//! and the size-only cache walk used for analytic memory estimates.
//!
//! Scale indices are 1-based throughout the crate: scale 1 is the coarsest
//! (usually `1x1`) grid and scale `K` the finest.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::cache::LayerClass;
use crate::error::{Error, Result};

/// Side lengths of the square token grids generated at each scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ScaleSchedule {
    sides: Vec<usize>,
}

impl ScaleSchedule {
    /// The common 10-scale schedule `1, 2, 3, 4, 5, 6, 8, 10, 13, 16`.
    pub const VAR_DEFAULT: [usize; 10] = [1, 2, 3, 4, 5, 6, 8, 10, 13, 16];

    pub fn new(sides: Vec<usize>) -> Result<Self> {
        if sides.is_empty() {
            return Err(Error::Config("schedule needs at least one scale".into()));
        }
        if sides.contains(&0) {
            return Err(Error::Config("schedule sides must be positive".into()));
        }
        if sides.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!(
                "schedule sides must be non-decreasing: {sides:?}"
            )));
        }
        Ok(Self { sides })
    }

    pub fn var_default() -> Self {
        Self {
            sides: Self::VAR_DEFAULT.to_vec(),
        }
    }

    pub fn sides(&self) -> &[usize] {
        &self.sides
    }

    /// Number of scales `K`.
    pub fn len(&self) -> usize {
        self.sides.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sides.is_empty()
    }

    pub fn side(&self, scale: usize) -> usize {
        self.sides[scale - 1]
    }

    /// `T_scale = side^2`.
    pub fn tokens(&self, scale: usize) -> usize {
        let s = self.side(scale);
        s * s
    }

    pub fn tokens_per_scale(&self) -> Vec<usize> {
        self.sides.iter().map(|s| s * s).collect()
    }

    /// Tokens in scales `1..=scale`.
    pub fn prefix_tokens(&self, scale: usize) -> usize {
        self.sides[..scale].iter().map(|s| s * s).sum()
    }

    /// Tokens held by the first `count` scales (clipped to `K`).
    pub fn condensed_tokens(&self, count: usize) -> usize {
        self.prefix_tokens(count.min(self.len()))
    }

    pub fn total_tokens(&self) -> usize {
        total_tokens(self)
    }

    pub fn scales(&self) -> impl Iterator<Item = usize> {
        1..=self.len()
    }
}

impl TryFrom<Vec<usize>> for ScaleSchedule {
    type Error = Error;

    fn try_from(sides: Vec<usize>) -> Result<Self> {
        Self::new(sides)
    }
}

impl From<ScaleSchedule> for Vec<usize> {
    fn from(s: ScaleSchedule) -> Self {
        s.sides
    }
}

pub fn total_tokens(schedule: &ScaleSchedule) -> usize {
    schedule.sides.iter().map(|s| s * s).sum()
}

/// How the layer-classification threshold is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ThetaMode {
    /// Demanding iff the similarity is below `value`.
    Absolute { value: f64 },
    /// Demanding iff the layer ranks in the lowest `rho` fraction of the
    /// fleet's similarity scores at the same scale.
    Quantile { rho: f64 },
}

impl Default for ThetaMode {
    fn default() -> Self {
        ThetaMode::Quantile { rho: 1.0 / 6.0 }
    }
}

/// Per-layer cache budget parameters, in tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetSpec {
    pub c_min: usize,
    pub c_max: usize,
    /// Number of leading scales pinned in every cache.
    pub condensed_count: usize,
    #[serde(default)]
    pub theta: ThetaMode,
}

impl BudgetSpec {
    /// Checks `C_cds tokens < C_min <= C_max` against a schedule.
    pub fn validate(&self, schedule: &ScaleSchedule) -> Result<()> {
        if self.condensed_count > schedule.len() {
            return Err(Error::Config(format!(
                "condensed_count {} exceeds the {} scales of the schedule",
                self.condensed_count,
                schedule.len()
            )));
        }
        let cds = schedule.condensed_tokens(self.condensed_count);
        if cds >= self.c_min {
            return Err(Error::Config(format!(
                "C_min >> C_cds violated: c_min = {} must exceed the {cds} tokens of the {} condensed scales",
                self.c_min, self.condensed_count
            )));
        }
        if self.c_min > self.c_max {
            return Err(Error::Config(format!(
                "c_min = {} exceeds c_max = {}",
                self.c_min, self.c_max
            )));
        }
        match self.theta {
            ThetaMode::Absolute { value } if value.is_nan() => {
                Err(Error::Config("theta value is NaN".into()))
            }
            ThetaMode::Quantile { rho } if !(rho > 0.0 && rho <= 1.0) => Err(Error::Config(
                format!("theta rho must lie in (0, 1], got {rho}"),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BudgetRule {
    /// `C_cds` = first two scales, `C_min` = penultimate scale + condensed,
    /// `C_max` = last two scales + condensed.
    #[default]
    Default,
    Explicit(BudgetSpec),
}

pub fn derive_budgets(schedule: &ScaleSchedule, rule: &BudgetRule) -> Result<BudgetSpec> {
    let spec = match rule {
        BudgetRule::Explicit(spec) => *spec,
        BudgetRule::Default => {
            let k = schedule.len();
            if k < 4 {
                return Err(Error::Config(format!(
                    "the default budget rule needs at least 4 scales, schedule has {k}"
                )));
            }
            let cds = schedule.condensed_tokens(2);
            let penultimate = schedule.tokens(k - 1);
            let last = schedule.tokens(k);
            BudgetSpec {
                c_min: penultimate + cds,
                c_max: penultimate + last + cds,
                condensed_count: 2,
                theta: ThetaMode::default(),
            }
        }
    };
    spec.validate(schedule)?;
    Ok(spec)
}

/// Partition of the scales preceding `current`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScaleGroups {
    pub condensed: Vec<usize>,
    pub local: Vec<usize>,
    pub intermediate: Vec<usize>,
}

impl ScaleGroups {
    pub fn contains(&self, group: ScaleGroup, scale: usize) -> bool {
        match group {
            ScaleGroup::Condensed => self.condensed.contains(&scale),
            ScaleGroup::Local => self.local.contains(&scale),
            ScaleGroup::Intermediate => self.intermediate.contains(&scale),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleGroup {
    Condensed,
    Local,
    Intermediate,
}

impl ScaleGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleGroup::Condensed => "condensed",
            ScaleGroup::Local => "local",
            ScaleGroup::Intermediate => "intermediate",
        }
    }
}

/// Groups the predecessors of `current`. Where the condensed and local
/// windows overlap, the scale counts as condensed.
pub fn scale_groups(
    schedule: &ScaleSchedule,
    current: usize,
    condensed_count: usize,
    n_local: usize,
) -> ScaleGroups {
    let last_pred = current.saturating_sub(1).min(schedule.len());
    let condensed_end = condensed_count.min(last_pred);
    let local_start = last_pred.saturating_sub(n_local) + 1;
    let mut groups = ScaleGroups::default();
    for s in 1..=last_pred {
        if s <= condensed_end {
            groups.condensed.push(s);
        } else if s >= local_start {
            groups.local.push(s);
        } else {
            groups.intermediate.push(s);
        }
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub bytes_per_element: usize,
}

impl MemoryModel {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.n_heads == 0
            || self.head_dim == 0
            || self.bytes_per_element == 0
        {
            return Err(Error::Config(format!(
                "memory model fields must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Bytes of one cached token in one layer (keys and values).
    pub fn bytes_per_token_per_layer(&self) -> u64 {
        2 * (self.n_heads * self.head_dim * self.bytes_per_element) as u64
    }
}

/// KV bytes for `tokens` cached tokens in every layer.
pub fn kv_bytes(tokens: usize, model: &MemoryModel) -> u64 {
    model.n_layers as u64 * model.bytes_per_token_per_layer() * tokens as u64
}

/// One step of the size-only cache walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WalkStep {
    pub scale: usize,
    pub tokens: usize,
    pub cached_before: usize,
    pub cached_after: usize,
    pub budget_after: usize,
    /// Tokens attended to at this step: the cache before the step plus the
    /// current scale.
    pub context_tokens: usize,
    pub stored: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerWalk {
    pub class: LayerClass,
    pub steps: Vec<WalkStep>,
}

impl LayerWalk {
    pub fn final_cached(&self) -> usize {
        self.steps.last().map_or(0, |s| s.cached_after)
    }

    pub fn peak_cached(&self) -> usize {
        self.steps.iter().map(|s| s.cached_after).max().unwrap_or(0)
    }

    pub fn max_budget(&self) -> usize {
        self.steps.iter().map(|s| s.budget_after).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyticTimeline {
    pub total_tokens: usize,
    pub spec: BudgetSpec,
    pub layers: Vec<LayerWalk>,
}

impl AnalyticTimeline {
    pub fn final_tokens_sum(&self) -> u64 {
        self.layers.iter().map(|l| l.final_cached() as u64).sum()
    }

    /// Fleet-average cached tokens after the last scale.
    pub fn mean_final_tokens(&self) -> Ratio<u64> {
        Ratio::new(self.final_tokens_sum(), self.layers.len() as u64)
    }

    /// `1 - mean_final / total_tokens`.
    pub fn reduction(&self) -> Ratio<u64> {
        Ratio::from_integer(1) - self.mean_final_tokens() / self.total_tokens as u64
    }

    /// `total_tokens / mean_final`.
    pub fn compression(&self) -> Ratio<u64> {
        Ratio::from_integer(self.total_tokens as u64) / self.mean_final_tokens()
    }

    /// Fleet-summed attended tokens at `scale`, divided by the full-cache
    /// equivalent. The FLOP count of a step is proportional to its context
    /// length, so this is also the per-scale attention FLOP ratio.
    pub fn context_ratio(&self, scale: usize) -> Ratio<u64> {
        let ours: u64 = self
            .layers
            .iter()
            .map(|l| l.steps[scale - 1].context_tokens as u64)
            .sum();
        let prefix: u64 = self.layers[0].steps[..scale]
            .iter()
            .map(|s| s.tokens as u64)
            .sum();
        Ratio::new(ours, prefix * self.layers.len() as u64)
    }

    /// First scale at which appending would exceed `C_min`. Every layer
    /// follows the same walk up to this point.
    pub fn first_overflow(&self) -> Option<usize> {
        self.layers.first().and_then(|l| {
            l.steps
                .iter()
                .find(|s| {
                    s.tokens <= self.spec.c_max && s.cached_before + s.tokens > self.spec.c_min
                })
                .map(|s| s.scale)
        })
    }
}

/// Walks the adaptive caching rule over token counts only. A demanding layer
/// is one whose similarity falls below the threshold at every overflow.
pub fn analytic_timeline(
    schedule: &ScaleSchedule,
    spec: &BudgetSpec,
    classification: &[LayerClass],
) -> Result<AnalyticTimeline> {
    spec.validate(schedule)?;
    if classification.is_empty() {
        return Err(Error::Config(
            "classification must cover at least one layer".into(),
        ));
    }
    let layers = classification
        .iter()
        .map(|&class| walk_layer(schedule, spec, class))
        .collect::<Result<Vec<_>>>()?;
    Ok(AnalyticTimeline {
        total_tokens: schedule.total_tokens(),
        spec: *spec,
        layers,
    })
}

fn walk_layer(schedule: &ScaleSchedule, spec: &BudgetSpec, class: LayerClass) -> Result<LayerWalk> {
    // (scale, tokens) in insertion order
    let mut held: Vec<(usize, usize)> = Vec::new();
    let mut budget = spec.c_min;
    let mut steps = Vec::with_capacity(schedule.len());
    for scale in schedule.scales() {
        let tokens = schedule.tokens(scale);
        let cached_before: usize = held.iter().map(|h| h.1).sum();
        let mut stored = false;
        if tokens <= spec.c_max {
            held.push((scale, tokens));
            stored = true;
            let mut size = cached_before + tokens;
            if size > budget {
                if budget == spec.c_min && class == LayerClass::Demanding {
                    budget = spec.c_max;
                }
                if tokens > budget {
                    held.pop();
                    stored = false;
                } else {
                    while size > budget {
                        let pos = held
                            .iter()
                            .position(|h| h.0 > spec.condensed_count)
                            .ok_or_else(|| {
                                Error::Invariant("condensed scales exceed the budget".into())
                            })?;
                        size -= held.remove(pos).1;
                    }
                }
            }
        }
        let cached_after = held.iter().map(|h| h.1).sum();
        steps.push(WalkStep {
            scale,
            tokens,
            cached_before,
            cached_after,
            budget_after: budget,
            context_tokens: cached_before + tokens,
            stored: stored && held.iter().any(|h| h.0 == scale),
        });
    }
    Ok(LayerWalk { class, steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched(s: &[usize]) -> ScaleSchedule {
        ScaleSchedule::new(s.to_vec()).unwrap()
    }

    #[test]
    fn total_tokens_examples() {
        assert_eq!(total_tokens(&ScaleSchedule::var_default()), 680);
        assert_eq!(total_tokens(&sched(&[1])), 1);
        assert_eq!(total_tokens(&sched(&[2, 2])), 8);
    }

    #[test]
    fn schedule_validation() {
        assert!(ScaleSchedule::new(vec![]).is_err());
        assert!(ScaleSchedule::new(vec![1, 0]).is_err());
        assert!(ScaleSchedule::new(vec![2, 1]).is_err());
    }

    #[test]
    fn default_budgets() {
        let spec = derive_budgets(&ScaleSchedule::var_default(), &BudgetRule::Default).unwrap();
        assert_eq!(
            (spec.c_min, spec.c_max, spec.condensed_count),
            (174, 430, 2)
        );
        let spec = derive_budgets(&sched(&[1, 2, 3, 4]), &BudgetRule::Default).unwrap();
        assert_eq!((spec.c_min, spec.c_max), (14, 30));
        let spec = derive_budgets(&sched(&[1, 2, 3, 4, 5]), &BudgetRule::Default).unwrap();
        assert_eq!((spec.c_min, spec.c_max), (21, 46));
    }

    #[test]
    fn default_rule_needs_four_scales() {
        let err = derive_budgets(&sched(&[1, 2, 3]), &BudgetRule::Default).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn explicit_budget_passes_through() {
        let spec = BudgetSpec {
            c_min: 20,
            c_max: 40,
            condensed_count: 1,
            theta: ThetaMode::Absolute { value: -3.0 },
        };
        assert_eq!(
            derive_budgets(&sched(&[1, 2, 3, 4]), &BudgetRule::Explicit(spec)).unwrap(),
            spec
        );
    }

    #[test]
    fn explicit_budget_below_condensed_names_invariant() {
        let spec = BudgetSpec {
            c_min: 5,
            c_max: 40,
            condensed_count: 2,
            theta: ThetaMode::default(),
        };
        let err = derive_budgets(&sched(&[1, 2, 3, 4]), &BudgetRule::Explicit(spec)).unwrap_err();
        assert!(err.to_string().contains("C_min >> C_cds"), "{err}");
    }

    #[test]
    fn groups_examples() {
        let s = ScaleSchedule::var_default();
        let g = scale_groups(&s, 10, 2, 2);
        assert_eq!(g.condensed, vec![1, 2]);
        assert_eq!(g.local, vec![8, 9]);
        assert_eq!(g.intermediate, vec![3, 4, 5, 6, 7]);

        assert_eq!(scale_groups(&s, 1, 2, 2), ScaleGroups::default());

        let g = scale_groups(&s, 3, 2, 2);
        assert_eq!(g.condensed, vec![1, 2]);
        assert!(g.local.is_empty() && g.intermediate.is_empty());
    }

    #[test]
    fn kv_bytes_examples() {
        let model = MemoryModel {
            n_layers: 2,
            n_heads: 2,
            head_dim: 4,
            bytes_per_element: 4,
        };
        // 2 (k and v) * 2 layers * 2 heads * 4 dims * 21 tokens * 4 bytes
        assert_eq!(kv_bytes(21, &model), 2688);
        assert_eq!(kv_bytes(0, &model), 0);
        assert_eq!(kv_bytes(42, &model), 2 * kv_bytes(21, &model));
    }

    #[test]
    fn analytic_default_schedule() {
        let s = ScaleSchedule::var_default();
        let spec = derive_budgets(&s, &BudgetRule::Default).unwrap();

        let eff = analytic_timeline(&s, &spec, &[LayerClass::Efficient]).unwrap();
        assert_eq!(eff.layers[0].final_cached(), 174);
        assert_eq!(eff.reduction(), Ratio::new(506, 680));

        let dem = analytic_timeline(&s, &spec, &[LayerClass::Demanding]).unwrap();
        assert_eq!(dem.layers[0].final_cached(), 430);
        assert_eq!(dem.reduction(), Ratio::new(250, 680));

        let mut mixed = vec![LayerClass::Efficient; 5];
        mixed.push(LayerClass::Demanding);
        let t = analytic_timeline(&s, &spec, &mixed).unwrap();
        assert_eq!(t.mean_final_tokens(), Ratio::new(1300, 6));
        let pct = *t.reduction().numer() as f64 / *t.reduction().denom() as f64 * 100.0;
        assert!((pct - 68.14).abs() < 0.01, "{pct}");
    }

    #[test]
    fn analytic_efficient_walk_details() {
        let s = ScaleSchedule::var_default();
        let spec = derive_budgets(&s, &BudgetRule::Default).unwrap();
        let t = analytic_timeline(&s, &spec, &[LayerClass::Efficient]).unwrap();
        let after: Vec<usize> = t.layers[0].steps.iter().map(|s| s.cached_after).collect();
        assert_eq!(after, vec![1, 5, 14, 30, 55, 91, 155, 169, 174, 174]);
        let ctx: Vec<usize> = t.layers[0].steps.iter().map(|s| s.context_tokens).collect();
        assert_eq!(ctx, vec![1, 5, 14, 30, 55, 91, 155, 255, 338, 430]);
        assert_eq!(t.first_overflow(), Some(8));
    }

    fn arb_schedule() -> impl Strategy<Value = ScaleSchedule> {
        prop::collection::vec(1usize..6, 2..9).prop_map(|incs| {
            let mut side = 0;
            let sides = incs
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    side += if i == 0 { 1 } else { *d % 3 };
                    side.max(1)
                })
                .collect();
            ScaleSchedule::new(sides).unwrap()
        })
    }

    proptest! {
        #[test]
        fn groups_partition(s in arb_schedule(), cur_seed in 0usize..100, cds in 0usize..4, n_local in 0usize..4) {
            let current = 1 + cur_seed % s.len();
            let g = scale_groups(&s, current, cds, n_local);
            let mut all: Vec<usize> = g.condensed.iter().chain(&g.local).chain(&g.intermediate).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (1..current).collect::<Vec<_>>());
            prop_assert!(g.condensed.iter().all(|&c| c <= cds));
        }

        #[test]
        fn default_budget_ordering(mut sides in prop::collection::vec(1usize..20, 4..10)) {
            sides.sort_unstable();
            let k = sides.len();
            prop_assume!(sides[k - 1] > sides[k - 2]);
            let s = ScaleSchedule::new(sides).unwrap();
            let spec = derive_budgets(&s, &BudgetRule::Default).unwrap();
            prop_assert!(s.condensed_tokens(spec.condensed_count) < spec.c_min);
            prop_assert!(spec.c_min <= spec.c_max);
        }

        #[test]
        fn walk_respects_budget(s in arb_schedule(), classes in prop::collection::vec(any::<bool>(), 1..5), extra in 1usize..50, gap in 0usize..80) {
            let cds = 1.min(s.len());
            let c_min = s.condensed_tokens(cds) + extra;
            let spec = BudgetSpec { c_min, c_max: c_min + gap, condensed_count: cds, theta: ThetaMode::default() };
            let classes: Vec<LayerClass> = classes.iter().map(|&d| if d { LayerClass::Demanding } else { LayerClass::Efficient }).collect();
            let t = analytic_timeline(&s, &spec, &classes).unwrap();
            for l in &t.layers {
                for st in &l.steps {
                    prop_assert!(st.cached_after <= st.budget_after);
                }
            }
        }

        #[test]
        fn walk_without_pressure_is_full_cache(s in arb_schedule(), slack in 0usize..10) {
            let total = s.total_tokens();
            let spec = BudgetSpec { c_min: total + slack, c_max: total + slack, condensed_count: 1, theta: ThetaMode::default() };
            let t = analytic_timeline(&s, &spec, &[LayerClass::Efficient]).unwrap();
            for (i, st) in t.layers[0].steps.iter().enumerate() {
                prop_assert_eq!(st.cached_after, s.prefix_tokens(i + 1));
            }
        }
    }
}
