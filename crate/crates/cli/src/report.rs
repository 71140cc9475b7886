//! Run reports. Everything except wall time is derived from the trace, so a
//! stored trace regenerates its report exactly.

use std::path::Path;

use amskv_core::cache::ValidationSummary;
use amskv_core::trace::verify_trace;
use amskv_core::{BudgetSpec, GenerationTrace, MemoryModel, PolicyKind};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Trace metadata keys written by the harness.
pub mod meta {
    pub const LABEL: &str = "label";
    pub const CONFIG_HASH: &str = "config_hash";
    pub const TOOL_VERSION: &str = "tool_version";
    pub const BYTES_PER_ELEMENT: &str = "bytes_per_element";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub final_budget: Option<usize>,
    pub peak_cached: usize,
    pub final_cached: usize,
    pub expanded_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub scale: usize,
    pub tokens: usize,
    /// Summed over layers.
    pub context_tokens: usize,
    /// Summed over layers, after the step.
    pub cached_tokens: usize,
    pub attention_flops: u64,
    pub full_cache_flops: u64,
    pub theta: Option<f64>,
    pub rel_l2: Option<f64>,
    pub cosine: Option<f64>,
    pub max_attention_abs_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub label: String,
    pub policy: PolicyKind,
    pub seed: u64,
    pub spec: BudgetSpec,
    pub total_tokens: usize,
    pub nominal_budget: usize,
    /// Largest per-layer cache size reached, in tokens.
    pub realized_budget: usize,
    pub final_cached_total: usize,
    pub peak_kv_bytes: u64,
    pub final_kv_bytes: u64,
    pub attention_flops: u64,
    pub full_cache_flops: u64,
    pub flop_ratio: f64,
    pub mean_rel_l2: Option<f64>,
    pub final_rel_l2: Option<f64>,
    pub final_cosine: Option<f64>,
    pub validation: ValidationSummary,
    pub layers: Vec<LayerSummary>,
    pub scales: Vec<ScaleRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
}

/// `2 * context * current * head_dim * heads` for one layer and step.
pub fn attention_flops(context: usize, current: usize, head_dim: usize, heads: usize) -> u64 {
    2 * context as u64 * current as u64 * head_dim as u64 * heads as u64
}

fn meta_value<'a>(trace: &'a GenerationTrace, key: &str) -> Result<&'a str, CliError> {
    trace
        .meta
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| CliError::Config(format!("trace metadata lacks `{key}`")))
}

impl RunReport {
    /// Validates the trace and summarizes it.
    pub fn from_trace(trace: &GenerationTrace) -> Result<Self, CliError> {
        let validation = verify_trace(trace)?;
        let bpe: usize = meta_value(trace, meta::BYTES_PER_ELEMENT)?
            .parse()
            .map_err(|_| {
                CliError::Config("trace metadata `bytes_per_element` is not a number".into())
            })?;
        let model = &trace.model;
        let memory = MemoryModel {
            n_layers: model.n_layers,
            n_heads: model.n_heads,
            head_dim: model.head_dim,
            bytes_per_element: bpe,
        };
        let per_token = memory.bytes_per_token_per_layer();
        let schedule = &model.schedule;
        let setup = &trace.setup;

        let mut scales = Vec::with_capacity(schedule.len());
        for s in &trace.scales {
            let steps: Vec<_> = trace.steps.iter().filter(|r| r.scale == s.scale).collect();
            let tokens = schedule.tokens(s.scale);
            let context_tokens: usize = steps.iter().map(|r| r.context_tokens).sum();
            let flops = steps
                .iter()
                .map(|r| attention_flops(r.context_tokens, tokens, model.head_dim, model.n_heads))
                .sum();
            let full = model.n_layers as u64
                * attention_flops(
                    schedule.prefix_tokens(s.scale),
                    tokens,
                    model.head_dim,
                    model.n_heads,
                );
            scales.push(ScaleRow {
                scale: s.scale,
                tokens,
                context_tokens,
                cached_tokens: steps.iter().map(|r| r.cached_tokens).sum(),
                attention_flops: flops,
                full_cache_flops: full,
                theta: s.theta,
                rel_l2: s.fidelity.map(|f| f.rel_l2),
                cosine: s.fidelity.map(|f| f.cosine),
                max_attention_abs_diff: s.fidelity.map(|f| f.max_attention_abs_diff),
            });
        }

        let layers: Vec<LayerSummary> = (0..setup.n_layers)
            .map(|l| {
                let steps: Vec<_> = trace.layer_steps(l).collect();
                let last = steps.last();
                LayerSummary {
                    layer: l,
                    final_budget: last.and_then(|r| r.budget),
                    peak_cached: steps.iter().map(|r| r.cached_tokens).max().unwrap_or(0),
                    final_cached: last.map_or(0, |r| r.cached_tokens),
                    expanded_at: steps
                        .iter()
                        .find(|r| {
                            matches!(
                                r.decision,
                                amskv_core::DecisionKind::ExpandedThenCached { .. }
                            )
                        })
                        .map(|r| r.scale),
                }
            })
            .collect();

        let attention_flops: u64 = scales.iter().map(|s| s.attention_flops).sum();
        let full_cache_flops: u64 = scales.iter().map(|s| s.full_cache_flops).sum();
        let fidelity = trace.fidelity();
        let final_cached_total = layers.iter().map(|l| l.final_cached).sum::<usize>();
        Ok(RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            tool_version: meta_value(trace, meta::TOOL_VERSION)?.to_string(),
            config_hash: meta_value(trace, meta::CONFIG_HASH)?.to_string(),
            label: meta_value(trace, meta::LABEL)?.to_string(),
            policy: setup.policy,
            seed: model.seed,
            spec: setup.spec,
            total_tokens: schedule.total_tokens(),
            nominal_budget: setup.nominal_budget(),
            realized_budget: layers.iter().map(|l| l.peak_cached).max().unwrap_or(0),
            final_cached_total,
            peak_kv_bytes: scales
                .iter()
                .map(|s| s.cached_tokens as u64 * per_token)
                .max()
                .unwrap_or(0),
            final_kv_bytes: final_cached_total as u64 * per_token,
            attention_flops,
            full_cache_flops,
            flop_ratio: attention_flops as f64 / full_cache_flops as f64,
            mean_rel_l2: fidelity.as_ref().map(|f| f.mean_rel_l2()),
            final_rel_l2: fidelity.as_ref().and_then(|f| f.last().map(|s| s.rel_l2)),
            final_cosine: fidelity.as_ref().and_then(|f| f.last().map(|s| s.cosine)),
            validation,
            layers,
            scales,
            wall_time_ms: None,
        })
    }

    /// The report without wall-clock fields.
    pub fn deterministic(&self) -> RunReport {
        RunReport {
            wall_time_ms: None,
            ..self.clone()
        }
    }

    pub fn comparison_row(&self) -> ComparisonRow {
        let note = if self.realized_budget > self.nominal_budget {
            "over budget".to_string()
        } else if self.realized_budget < self.nominal_budget {
            format!(
                "whole-scale rounding -{}",
                self.nominal_budget - self.realized_budget
            )
        } else {
            "exact".to_string()
        };
        ComparisonRow {
            label: self.label.clone(),
            policy: self.policy.label(),
            seed: self.seed,
            c_min: self.spec.c_min,
            c_max: self.spec.c_max,
            condensed_count: self.spec.condensed_count,
            nominal_budget: self.nominal_budget,
            realized_budget: self.realized_budget,
            budget_note: note,
            final_cached_total: self.final_cached_total,
            peak_kv_bytes: self.peak_kv_bytes,
            final_kv_bytes: self.final_kv_bytes,
            attention_flops: self.attention_flops,
            flop_ratio: self.flop_ratio,
            mean_rel_l2: self.mean_rel_l2,
            final_rel_l2: self.final_rel_l2,
            final_cosine: self.final_cosine,
            fidelity_rank: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub policy: String,
    pub seed: u64,
    pub c_min: usize,
    pub c_max: usize,
    pub condensed_count: usize,
    pub nominal_budget: usize,
    pub realized_budget: usize,
    pub budget_note: String,
    pub final_cached_total: usize,
    pub peak_kv_bytes: u64,
    pub final_kv_bytes: u64,
    pub attention_flops: u64,
    pub flop_ratio: f64,
    pub mean_rel_l2: Option<f64>,
    pub final_rel_l2: Option<f64>,
    pub final_cosine: Option<f64>,
    /// 1 = lowest mean relative error among the rows of the same seed.
    pub fidelity_rank: Option<usize>,
}

/// Comparison rows with fidelity ranks filled in per seed.
pub fn comparison_table(reports: &[RunReport]) -> Vec<ComparisonRow> {
    let mut rows: Vec<ComparisonRow> = reports.iter().map(RunReport::comparison_row).collect();
    for i in 0..rows.len() {
        let Some(mine) = rows[i].mean_rel_l2 else {
            continue;
        };
        let better = rows
            .iter()
            .enumerate()
            .filter(|(j, r)| {
                r.seed == rows[i].seed
                    && r.mean_rel_l2
                        .is_some_and(|v| v < mine || (v == mine && *j < i))
            })
            .count();
        rows[i].fidelity_rank = Some(better + 1);
    }
    rows
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<RunReport, CliError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
