//! Adaptive multi-scale KV caching for next-scale autoregressive decoding.
//!
//! The crate is split by concern:
//!
//! - [`kernel`]: dense matrices, softmax, bilinear resize and seeded init
//! - [`schedule`]: scale schedules, budgets, scale groups and memory
//!   accounting, plus a size-only analytic walk of the cache policy
//! - [`cache`]: per-layer cache policies and a trace validator
//! - [`attn`]: block attention over cached scales, attention density and
//!   inter-scale key similarity
//! - [`model`]: a seeded toy next-scale transformer driving the caches
//! - [`trace`]: JSON-lines traces and decision replay

pub mod attn;
pub mod cache;
pub mod error;
pub mod kernel;
pub mod model;
pub mod schedule;
pub mod trace;

pub use attn::{
    attention_density, block_attention, inter_scale_similarity, DensityTable, FidelityReport,
    ScaleFidelity, Similarity,
};
pub use cache::{
    validate_records, AllocStrategy, BlockShape, CacheDecision, DecisionKind, FleetSetup, KvBlock,
    LayerCache, LayerClass, PolicyCache, PolicyKind, ScaleBlock, StepRecord,
};
pub use error::{Error, Result};
pub use kernel::{Matrix, SplitMix64};
pub use model::{generate, init_model, GenerateOptions, GenerationTrace, ToyModel, ToyModelConfig};
pub use schedule::{
    derive_budgets, kv_bytes, total_tokens, BudgetRule, BudgetSpec, MemoryModel, ScaleGroup,
    ScaleSchedule, ThetaMode,
};
pub use trace::{replay, verify_trace};
