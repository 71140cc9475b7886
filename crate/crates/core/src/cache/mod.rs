//! Cache policies over whole-scale KV blocks.
//!
//! [`LayerCache`] is the adaptive multi-scale policy: each layer starts with
//! the reserved budget `C_min`, rolls finer scales through a condensed-FIFO
//! eviction ([`clru_evict`]) and expands once to `C_max` when the layer's
//! inter-scale key similarity falls below the threshold. Baselines and
//! ablations live in [`policy`]; [`validate`] re-checks recorded traces.

mod classify;
mod clru;
pub mod policy;
pub mod validate;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Matrix;

pub use classify::{
    classify_layer, classify_layers, demanding_count, quantile_threshold, LayerClass,
};
pub use clru::{clru_evict, LayerCache};
pub use policy::{context_view, AllocStrategy, FleetSetup, PolicyCache, PolicyKind};
pub use validate::{simulate, validate_records, StepRecord, ValidationSummary};

/// Anything the policies can hold: a scale index and a token count.
pub trait ScaleBlock {
    fn scale(&self) -> usize;
    fn tokens(&self) -> usize;
}

/// Keys and values of one scale in one layer, one matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock {
    scale: usize,
    side: usize,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
}

impl KvBlock {
    pub fn new(scale: usize, side: usize, keys: Vec<Matrix>, values: Vec<Matrix>) -> Result<Self> {
        let t = side * side;
        if keys.is_empty() || keys.len() != values.len() {
            return Err(Error::Shape(format!(
                "block needs matching per-head keys and values, got {} and {}",
                keys.len(),
                values.len()
            )));
        }
        let head_dim = keys[0].cols();
        for (k, v) in keys.iter().zip(&values) {
            if k.rows() != t || v.rows() != t || k.cols() != head_dim || v.cols() != head_dim {
                return Err(Error::Shape(format!(
                    "scale {scale} block expects {t}x{head_dim} per head, got keys {}x{} values {}x{}",
                    k.rows(),
                    k.cols(),
                    v.rows(),
                    v.cols()
                )));
            }
        }
        Ok(Self {
            scale,
            side,
            keys,
            values,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn n_heads(&self) -> usize {
        self.keys.len()
    }

    pub fn head_dim(&self) -> usize {
        self.keys[0].cols()
    }

    pub fn keys(&self) -> &[Matrix] {
        &self.keys
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn shape(&self) -> BlockShape {
        BlockShape {
            scale: self.scale,
            side: self.side,
        }
    }
}

impl ScaleBlock for KvBlock {
    fn scale(&self) -> usize {
        self.scale
    }

    fn tokens(&self) -> usize {
        self.side * self.side
    }
}

/// A tensor-free stand-in for a block, used for replay and size walks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub scale: usize,
    pub side: usize,
}

impl ScaleBlock for BlockShape {
    fn scale(&self) -> usize {
        self.scale
    }

    fn tokens(&self) -> usize {
        self.side * self.side
    }
}

impl<B: ScaleBlock> ScaleBlock for &B {
    fn scale(&self) -> usize {
        (**self).scale()
    }

    fn tokens(&self) -> usize {
        (**self).tokens()
    }
}

/// Which branch a caching step took.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecisionKind {
    Cached,
    CachedWithEviction { evicted: Vec<usize> },
    SkippedExceedsCmax,
    SkippedExceedsBudget,
    ExpandedThenCached { evicted: Vec<usize> },
}

impl DecisionKind {
    pub fn evicted(&self) -> &[usize] {
        match self {
            DecisionKind::CachedWithEviction { evicted }
            | DecisionKind::ExpandedThenCached { evicted } => evicted,
            _ => &[],
        }
    }

    pub fn is_skip(&self) -> bool {
        matches!(
            self,
            DecisionKind::SkippedExceedsCmax | DecisionKind::SkippedExceedsBudget
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecisionKind::Cached => "cached",
            DecisionKind::CachedWithEviction { .. } => "cached_with_eviction",
            DecisionKind::SkippedExceedsCmax => "skipped_exceeds_cmax",
            DecisionKind::SkippedExceedsBudget => "skipped_exceeds_budget",
            DecisionKind::ExpandedThenCached { .. } => "expanded_then_cached",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheDecision {
    pub kind: DecisionKind,
    pub sim_score: Option<f64>,
}
