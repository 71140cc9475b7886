//! Shared fixtures for the criterion benches.

use amskv_core::cache::FleetSetup;
use amskv_core::kernel::{seeded_init, Distribution, Matrix};
use amskv_core::{derive_budgets, BudgetRule, KvBlock, PolicyKind, ScaleSchedule, ToyModelConfig};

pub fn gaussian(seed: u64, rows: usize, cols: usize) -> Matrix {
    seeded_init(seed, rows, cols, Distribution::Gaussian)
}

/// Keys and values of one scale, `heads` matrices of `side^2 x head_dim`.
pub fn block(scale: usize, side: usize, heads: usize, head_dim: usize) -> KvBlock {
    let t = side * side;
    let seed = (scale as u64) << 8;
    let keys = (0..heads)
        .map(|h| gaussian(seed + h as u64, t, head_dim))
        .collect();
    let values = (0..heads)
        .map(|h| gaussian(seed + 128 + h as u64, t, head_dim))
        .collect();
    KvBlock::new(scale, side, keys, values).expect("consistent block")
}

/// Every scale of the default schedule as blocks.
pub fn history(heads: usize, head_dim: usize) -> Vec<KvBlock> {
    let s = ScaleSchedule::var_default();
    s.scales()
        .map(|k| block(k, s.side(k), heads, head_dim))
        .collect()
}

pub fn fleet(policy: PolicyKind, n_layers: usize) -> FleetSetup {
    let schedule = ScaleSchedule::var_default();
    let spec = derive_budgets(&schedule, &BudgetRule::Default).expect("default budgets");
    FleetSetup::new(policy, spec, schedule, n_layers, 2).expect("valid fleet")
}

/// Deterministic per-(scale, layer) similarity scores.
pub fn similarity_stream(n_layers: usize) -> Vec<Vec<f64>> {
    let g = gaussian(99, ScaleSchedule::var_default().len(), n_layers);
    (0..g.rows())
        .map(|r| g.row(r).iter().map(|v| -v.abs() * 10.0).collect())
        .collect()
}

pub fn toy_model(n_layers: usize) -> ToyModelConfig {
    ToyModelConfig {
        n_layers,
        n_heads: 2,
        head_dim: 8,
        vocab_size: 64,
        schedule: ScaleSchedule::var_default(),
        seed: 0,
    }
}
