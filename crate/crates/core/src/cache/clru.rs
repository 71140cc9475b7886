use crate::cache::{CacheDecision, DecisionKind, ScaleBlock};
use crate::error::{Error, Result};
use crate::schedule::BudgetSpec;

/// Condensed-FIFO eviction: drops the oldest non-condensed blocks until the
/// held tokens fit `budget`. Returns the evicted scales in eviction order.
pub fn clru_evict<B: ScaleBlock>(
    blocks: &mut Vec<B>,
    condensed_count: usize,
    budget: usize,
) -> Result<Vec<usize>> {
    let condensed: usize = blocks
        .iter()
        .filter(|b| b.scale() <= condensed_count)
        .map(ScaleBlock::tokens)
        .sum();
    if condensed > budget {
        return Err(Error::Invariant(format!(
            "condensed scales hold {condensed} tokens, more than the budget of {budget}"
        )));
    }
    let mut size: usize = blocks.iter().map(ScaleBlock::tokens).sum();
    let mut evicted = Vec::new();
    while size > budget {
        // condensed blocks fit the budget, so a non-condensed one exists
        let pos = blocks
            .iter()
            .position(|b| b.scale() > condensed_count)
            .expect("non-condensed block available while over budget");
        let b = blocks.remove(pos);
        size -= b.tokens();
        evicted.push(b.scale());
    }
    Ok(evicted)
}

/// Per-layer adaptive cache: condensed scales pinned, finer scales rolled,
/// budget expanded once from `C_min` to `C_max` for cache-demanding layers.
#[derive(Debug, Clone)]
pub struct LayerCache<B> {
    layer_id: usize,
    blocks: Vec<B>,
    condensed_count: usize,
    c_min: usize,
    c_max: usize,
    budget: usize,
    adaptive: bool,
    next_scale: usize,
    expanded_at: Option<usize>,
}

impl<B: ScaleBlock> LayerCache<B> {
    /// An adaptive cache starting as cache-efficient (`budget = C_min`).
    pub fn new(layer_id: usize, spec: &BudgetSpec) -> Self {
        Self {
            layer_id,
            blocks: Vec::new(),
            condensed_count: spec.condensed_count,
            c_min: spec.c_min,
            c_max: spec.c_max,
            budget: spec.c_min,
            adaptive: true,
            next_scale: 1,
            expanded_at: None,
        }
    }

    /// A fixed-budget cache with the same skip and eviction rules but no
    /// similarity guard.
    pub fn fixed(layer_id: usize, budget: usize, condensed_count: usize) -> Self {
        Self {
            layer_id,
            blocks: Vec::new(),
            condensed_count,
            c_min: budget,
            c_max: budget,
            budget,
            adaptive: false,
            next_scale: 1,
            expanded_at: None,
        }
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }

    pub fn blocks(&self) -> &[B] {
        &self.blocks
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn c_min(&self) -> usize {
        self.c_min
    }

    pub fn c_max(&self) -> usize {
        self.c_max
    }

    pub fn condensed_count(&self) -> usize {
        self.condensed_count
    }

    pub fn is_adaptive(&self) -> bool {
        self.adaptive
    }

    pub fn is_demanding(&self) -> bool {
        self.expanded_at.is_some()
    }

    /// Scale at which the budget was expanded, if it was.
    pub fn expanded_at(&self) -> Option<usize> {
        self.expanded_at
    }

    pub fn cached_tokens(&self) -> usize {
        self.blocks.iter().map(ScaleBlock::tokens).sum()
    }

    /// Offers the next scale's block to the cache.
    ///
    /// `similarity` is `S(k_i, k^_{i-1})` for this layer and must be present
    /// whenever the expansion guard is evaluated; `theta` is the threshold in
    /// force for this step.
    pub fn step(&mut self, block: B, similarity: Option<f64>, theta: f64) -> Result<CacheDecision> {
        let scale = block.scale();
        if scale != self.next_scale {
            return Err(Error::Protocol(format!(
                "layer {} expected scale {}, got {scale}",
                self.layer_id, self.next_scale
            )));
        }
        self.next_scale += 1;
        let tokens = block.tokens();
        let decision = |kind| CacheDecision {
            kind,
            sim_score: similarity,
        };

        if tokens > self.c_max {
            return Ok(decision(DecisionKind::SkippedExceedsCmax));
        }
        let size = self.cached_tokens() + tokens;
        self.blocks.push(block);
        if size <= self.budget {
            return Ok(decision(DecisionKind::Cached));
        }

        let mut expanded = false;
        if self.adaptive && self.budget == self.c_min {
            let s = similarity.ok_or_else(|| {
                Error::Protocol(format!(
                    "layer {} overflowed at scale {scale} without a similarity score",
                    self.layer_id
                ))
            })?;
            if s < theta && self.c_max > self.c_min {
                self.budget = self.c_max;
                self.expanded_at = Some(scale);
                expanded = true;
            }
        }
        if tokens > self.budget {
            self.blocks.pop();
            return Ok(decision(DecisionKind::SkippedExceedsBudget));
        }
        let evicted = clru_evict(&mut self.blocks, self.condensed_count, self.budget)?;
        Ok(decision(if expanded {
            DecisionKind::ExpandedThenCached { evicted }
        } else {
            DecisionKind::CachedWithEviction { evicted }
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::BlockShape;
    use crate::schedule::{derive_budgets, BudgetRule, ScaleSchedule, ThetaMode};

    fn shapes(sides: &[usize]) -> Vec<BlockShape> {
        sides
            .iter()
            .enumerate()
            .map(|(i, &side)| BlockShape { scale: i + 1, side })
            .collect()
    }

    fn scales(c: &LayerCache<BlockShape>) -> Vec<usize> {
        c.blocks().iter().map(|b| b.scale).collect()
    }

    #[test]
    fn clru_examples() {
        let mut b = shapes(&[1, 2, 3, 4]);
        assert_eq!(clru_evict(&mut b, 2, 21).unwrap(), vec![3]);
        assert_eq!(b.iter().map(|x| x.tokens()).sum::<usize>(), 21);

        let mut b = shapes(&[1, 2, 3]);
        assert_eq!(clru_evict(&mut b, 2, 100).unwrap(), Vec::<usize>::new());

        let mut b = shapes(&[1, 2, 3, 4, 5]);
        assert_eq!(clru_evict(&mut b, 2, 30).unwrap(), vec![3, 4]);
        assert_eq!(b.iter().map(|x| x.scale).collect::<Vec<_>>(), vec![1, 2, 5]);
    }

    #[test]
    fn clru_condensed_over_budget() {
        let mut b = shapes(&[1, 2, 3]);
        assert!(matches!(clru_evict(&mut b, 2, 4), Err(Error::Invariant(_))));
    }

    #[test]
    fn efficient_walk_tiny_schedule() {
        let sides = [1, 2, 3, 4, 5];
        let spec = derive_budgets(
            &ScaleSchedule::new(sides.to_vec()).unwrap(),
            &BudgetRule::Default,
        )
        .unwrap();
        assert_eq!((spec.c_min, spec.c_max), (21, 46));
        let theta = -10.0;
        let mut c = LayerCache::new(0, &spec);
        let kinds: Vec<DecisionKind> = shapes(&sides)
            .into_iter()
            .map(|b| c.step(b, Some(0.0), theta).unwrap().kind)
            .collect();
        assert_eq!(
            kinds,
            vec![
                DecisionKind::Cached,
                DecisionKind::Cached,
                DecisionKind::Cached,
                DecisionKind::CachedWithEviction { evicted: vec![3] },
                DecisionKind::SkippedExceedsBudget,
            ]
        );
        assert_eq!(scales(&c), vec![1, 2, 4]);
        assert_eq!(c.cached_tokens(), 21);
        assert_eq!(c.budget(), 21);
    }

    #[test]
    fn demanding_walk_tiny_schedule() {
        let sides = [1, 2, 3, 4, 5];
        let spec = derive_budgets(
            &ScaleSchedule::new(sides.to_vec()).unwrap(),
            &BudgetRule::Default,
        )
        .unwrap();
        let theta = -10.0;
        let mut c = LayerCache::new(0, &spec);
        let mut last = None;
        for b in shapes(&sides) {
            // similar through scale 4, dissimilar at scale 5
            let s = if b.scale == 5 { -20.0 } else { 0.0 };
            last = Some(c.step(b, Some(s), theta).unwrap().kind);
        }
        assert_eq!(
            last,
            Some(DecisionKind::ExpandedThenCached { evicted: vec![] })
        );
        assert_eq!(scales(&c), vec![1, 2, 4, 5]);
        assert_eq!(c.cached_tokens(), 46);
        assert_eq!(c.budget(), spec.c_max);
        assert_eq!(c.expanded_at(), Some(5));
    }

    #[test]
    fn degenerate_budget_caches_everything() {
        let sched = ScaleSchedule::var_default();
        let total = sched.total_tokens();
        let spec = BudgetSpec {
            c_min: total,
            c_max: total,
            condensed_count: 2,
            theta: ThetaMode::default(),
        };
        let mut c = LayerCache::new(0, &spec);
        for b in shapes(sched.sides()) {
            assert_eq!(c.step(b, None, 0.0).unwrap().kind, DecisionKind::Cached);
        }
        assert_eq!(c.cached_tokens(), total);
    }

    #[test]
    fn skip_exceeding_cmax() {
        let spec = BudgetSpec {
            c_min: 6,
            c_max: 8,
            condensed_count: 1,
            theta: ThetaMode::default(),
        };
        let mut c = LayerCache::new(0, &spec);
        c.step(BlockShape { scale: 1, side: 1 }, None, 0.0).unwrap();
        let d = c
            .step(BlockShape { scale: 2, side: 3 }, Some(-1.0), 0.0)
            .unwrap();
        assert_eq!(d.kind, DecisionKind::SkippedExceedsCmax);
        assert_eq!(c.cached_tokens(), 1);
    }

    #[test]
    fn protocol_errors() {
        let spec = BudgetSpec {
            c_min: 6,
            c_max: 12,
            condensed_count: 1,
            theta: ThetaMode::default(),
        };
        let mut c = LayerCache::new(3, &spec);
        assert!(matches!(
            c.step(BlockShape { scale: 2, side: 1 }, None, 0.0),
            Err(Error::Protocol(_))
        ));
        c.step(BlockShape { scale: 1, side: 1 }, None, 0.0).unwrap();
        // 1 + 4 fits, the guard is not reached
        assert_eq!(
            c.step(BlockShape { scale: 2, side: 2 }, None, 0.0)
                .unwrap()
                .kind,
            DecisionKind::Cached
        );
        // 5 + 9 > 6 reaches the guard
        assert!(matches!(
            c.step(BlockShape { scale: 3, side: 3 }, None, 0.0),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn fixed_cache_never_expands() {
        let mut c = LayerCache::fixed(0, 21, 2);
        for b in shapes(&[1, 2, 3, 4, 5]) {
            c.step(b, None, f64::MAX).unwrap();
        }
        assert_eq!(c.budget(), 21);
        assert!(!c.is_demanding());
    }
}
