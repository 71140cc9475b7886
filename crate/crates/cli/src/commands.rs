use std::path::{Path, PathBuf};
use std::time::Instant;

use amskv_core::attn::DensityTable;
use amskv_core::{generate, init_model, GenerateOptions, GenerationTrace, PolicyKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, PolicyEntry, ReportFormat};
use crate::error::CliError;
use crate::report::{
    comparison_table, meta, read_report, write_csv, write_json, write_jsonl, RunReport,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct RunOutput {
    pub reports: Vec<RunReport>,
    pub traces: Vec<GenerationTrace>,
}

fn run_one(
    config: &ExperimentConfig,
    hash: &str,
    policy: usize,
    seed: u64,
) -> Result<(RunReport, GenerationTrace), CliError> {
    let start = Instant::now();
    let entry = &config.policies[policy];
    let model = init_model(&config.model_config(seed))?;
    let spec = config.spec_for(policy)?;
    let opts = GenerateOptions {
        compare_oracle: config.compare_oracle,
        n_local: config.n_local,
        density_scale: None,
    };
    let mut trace = generate(&model, entry.policy, &spec, &opts)?;
    trace.meta.insert(meta::LABEL.into(), entry.label());
    trace
        .meta
        .insert(meta::CONFIG_HASH.into(), hash.to_string());
    trace
        .meta
        .insert(meta::TOOL_VERSION.into(), TOOL_VERSION.into());
    trace.meta.insert(
        meta::BYTES_PER_ELEMENT.into(),
        config.memory.bytes_per_element.to_string(),
    );
    let mut report = RunReport::from_trace(&trace)?;
    report.wall_time_ms = Some(start.elapsed().as_secs_f64() * 1e3);
    Ok((report, trace))
}

/// Runs every (policy, seed) pair, in parallel; results come back in
/// config order.
pub fn execute(config: &ExperimentConfig) -> Result<RunOutput, CliError> {
    config.validate()?;
    let hash = config.hash();
    let jobs: Vec<(usize, u64)> = (0..config.policies.len())
        .flat_map(|p| config.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let results: Vec<(RunReport, GenerationTrace)> = jobs
        .par_iter()
        .map(|&(p, s)| run_one(config, &hash, p, s))
        .collect::<Result<_, _>>()?;
    let (reports, traces) = results.into_iter().unzip();
    Ok(RunOutput { reports, traces })
}

fn file_stem(report: &RunReport) -> String {
    let label: String = report
        .label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{label}-seed{}", report.seed)
}

/// Writes per-run reports, traces and scale tables plus the comparison
/// table; returns the written paths.
pub fn write_run(
    dir: &Path,
    formats: &[ReportFormat],
    out: &RunOutput,
) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (report, trace) in out.reports.iter().zip(&out.traces) {
        let stem = file_stem(report);
        let p = dir.join(format!("{stem}.report.json"));
        write_json(&p, report)?;
        written.push(p);
        let p = dir.join(format!("{stem}.trace.jsonl"));
        std::fs::write(&p, trace.to_jsonl()?)?;
        written.push(p);
        for f in formats {
            let p = match f {
                ReportFormat::Csv => {
                    let p = dir.join(format!("{stem}.scales.csv"));
                    write_csv(&p, &report.scales)?;
                    p
                }
                ReportFormat::JsonLines => {
                    let p = dir.join(format!("{stem}.scales.jsonl"));
                    write_jsonl(&p, &report.scales)?;
                    p
                }
            };
            written.push(p);
        }
    }
    let table = comparison_table(&out.reports);
    for f in formats {
        let p = match f {
            ReportFormat::Csv => {
                let p = dir.join("comparison.csv");
                write_csv(&p, &table)?;
                p
            }
            ReportFormat::JsonLines => {
                let p = dir.join("comparison.jsonl");
                write_jsonl(&p, &table)?;
                p
            }
        };
        written.push(p);
    }
    Ok(written)
}

pub fn summary_lines(reports: &[RunReport]) -> String {
    let mut s = String::new();
    for r in reports {
        s.push_str(&format!(
            "{:<24} seed {:<4} budget {:>5}/{:<5} final cached {:>6} flops {:.4}",
            r.label,
            r.seed,
            r.realized_budget,
            r.nominal_budget,
            r.final_cached_total,
            r.flop_ratio
        ));
        if let Some(e) = r.mean_rel_l2 {
            s.push_str(&format!(" mean rel err {e:.3e}"));
        }
        s.push('\n');
    }
    s
}

pub fn run(config: &ExperimentConfig) -> Result<String, CliError> {
    let out = execute(config)?;
    let files = write_run(&config.output_dir, &config.formats, &out)?;
    Ok(format!(
        "{}wrote {} files to {}\n",
        summary_lines(&out.reports),
        files.len(),
        config.output_dir.display()
    ))
}

/// Adaptive, sliding-window and sink-window policies matched to one token
/// budget. The sink holds the condensed scales.
pub fn compare_config(
    base: &ExperimentConfig,
    budget: usize,
) -> Result<ExperimentConfig, CliError> {
    let spec = base.base_spec()?;
    let schedule = &base.model.schedule;
    let sink = schedule.condensed_tokens(spec.condensed_count);
    if sink == 0 {
        return Err(CliError::Config(
            "compare needs at least one condensed scale for the sink".into(),
        ));
    }
    if budget <= sink || budget < schedule.tokens(1) {
        return Err(CliError::Config(format!(
            "budget {budget} is unrealizable: it must exceed the {sink} condensed tokens"
        )));
    }
    let mut ams = PolicyEntry::new(PolicyKind::AmsKv);
    ams.label = Some("ams-kv".into());
    ams.c_min = Some(budget);
    ams.c_max = Some(budget);
    let mut window = PolicyEntry::new(PolicyKind::SlidingWindow { window: budget });
    window.label = Some("sliding-window".into());
    let mut sinkw = PolicyEntry::new(PolicyKind::SinkWindow {
        sink,
        window: budget - sink,
    });
    sinkw.label = Some("sink-window".into());
    let mut cfg = base.clone();
    cfg.policies = vec![ams, window, sinkw];
    cfg.validate()?;
    Ok(cfg)
}

pub fn compare(base: &ExperimentConfig, budget: usize) -> Result<String, CliError> {
    let cfg = compare_config(base, budget)?;
    let out = execute(&cfg)?;
    let files = write_run(&cfg.output_dir, &cfg.formats, &out)?;
    let mut s = format!(
        "matched budget {budget} tokens of {}\n",
        cfg.model.schedule.total_tokens()
    );
    s.push_str(&summary_lines(&out.reports));
    s.push_str(&format!(
        "wrote {} files to {}\n",
        files.len(),
        cfg.output_dir.display()
    ));
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRow {
    pub target_scale: usize,
    pub target_tokens: usize,
    pub head: usize,
    pub source_scale: usize,
    pub source_tokens: usize,
    /// Layer-mean density.
    pub density: f64,
    /// `sum_i T_i d_{i<-j}` over every source scale including the target.
    pub head_mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub layer: usize,
    pub scale: usize,
    pub score: f64,
    pub rms: f64,
}

pub struct Analysis {
    pub density: Vec<DensityRow>,
    pub similarity: Vec<SimilarityRow>,
}

/// Full-cache generation with attention materialized at `scale`.
pub fn analyze_rows(config: &ExperimentConfig, scale: usize) -> Result<Analysis, CliError> {
    config.validate()?;
    let model = init_model(&config.model_config(config.seeds[0]))?;
    let spec = config.base_spec()?;
    let opts = GenerateOptions {
        compare_oracle: false,
        n_local: config.n_local,
        density_scale: Some(scale),
    };
    let trace = generate(&model, PolicyKind::FullCache, &spec, &opts)?;
    let tables: Vec<DensityTable> = trace.densities.iter().map(|d| d.table.clone()).collect();
    let mean = DensityTable::mean(&tables)?;
    let schedule = &config.model.schedule;
    let mut density = Vec::new();
    for head in 0..mean.n_heads {
        let mass = mean.mass(head);
        for source in 1..scale {
            density.push(DensityRow {
                target_scale: scale,
                target_tokens: mean.target_tokens,
                head,
                source_scale: source,
                source_tokens: schedule.tokens(source),
                density: mean.value(head, source).unwrap_or(0.0),
                head_mass: mass,
            });
        }
    }
    let similarity = trace
        .similarities
        .iter()
        .map(|s| SimilarityRow {
            layer: s.layer,
            scale: s.scale,
            score: s.score,
            rms: s.rms,
        })
        .collect();
    Ok(Analysis {
        density,
        similarity,
    })
}

pub fn analyze(config: &ExperimentConfig, scale: Option<usize>) -> Result<String, CliError> {
    let scale = scale.unwrap_or(config.model.schedule.len());
    let a = analyze_rows(config, scale)?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in &config.formats {
        match f {
            ReportFormat::Csv => {
                write_csv(&dir.join("density.csv"), &a.density)?;
                write_csv(&dir.join("similarity.csv"), &a.similarity)?;
                written.extend(["density.csv", "similarity.csv"]);
            }
            ReportFormat::JsonLines => {
                write_jsonl(&dir.join("density.jsonl"), &a.density)?;
                write_jsonl(&dir.join("similarity.jsonl"), &a.similarity)?;
                written.extend(["density.jsonl", "similarity.jsonl"]);
            }
        }
    }
    Ok(format!(
        "density at scale {scale}: {} rows, similarity: {} rows; wrote {} to {}\n",
        a.density.len(),
        a.similarity.len(),
        written.join(", "),
        dir.display()
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub label: String,
    pub seed: u64,
    pub scale: usize,
    pub step_tokens: usize,
    pub cached_tokens_total: usize,
    pub cached_tokens_mean: f64,
    pub cached_tokens_max: usize,
    /// Current scale's transient keys and values, per layer.
    pub working_set_tokens: usize,
    pub cached_kv_bytes: u64,
    pub working_set_kv_bytes: u64,
}

pub fn timeline_rows(config: &ExperimentConfig) -> Result<Vec<TimelineRow>, CliError> {
    let mut cfg = config.clone();
    cfg.compare_oracle = false;
    let out = execute(&cfg)?;
    let per_token = cfg.memory_model().bytes_per_token_per_layer();
    let layers = cfg.model.n_layers;
    let mut rows = Vec::new();
    for (report, trace) in out.reports.iter().zip(&out.traces) {
        for scale in trace.model.schedule.scales() {
            let cached: Vec<usize> = trace
                .steps
                .iter()
                .filter(|r| r.scale == scale)
                .map(|r| r.cached_tokens)
                .collect();
            let total: usize = cached.iter().sum();
            let t = trace.model.schedule.tokens(scale);
            rows.push(TimelineRow {
                label: report.label.clone(),
                seed: report.seed,
                scale,
                step_tokens: t,
                cached_tokens_total: total,
                cached_tokens_mean: total as f64 / layers as f64,
                cached_tokens_max: cached.iter().copied().max().unwrap_or(0),
                working_set_tokens: t,
                cached_kv_bytes: total as u64 * per_token,
                working_set_kv_bytes: (t * layers) as u64 * per_token,
            });
        }
    }
    Ok(rows)
}

pub fn timeline(config: &ExperimentConfig) -> Result<String, CliError> {
    let rows = timeline_rows(config)?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir)?;
    for f in &config.formats {
        match f {
            ReportFormat::Csv => write_csv(&dir.join("timeline.csv"), &rows)?,
            ReportFormat::JsonLines => write_jsonl(&dir.join("timeline.jsonl"), &rows)?,
        }
    }
    Ok(format!(
        "{} timeline rows written to {}\n",
        rows.len(),
        dir.display()
    ))
}

/// Checks a stored trace and, if given, that it regenerates the stored report.
pub fn validate_trace(trace_path: &Path, report_path: Option<&Path>) -> Result<String, CliError> {
    let text = std::fs::read_to_string(trace_path)?;
    let trace = GenerationTrace::from_jsonl(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", trace_path.display())))?;
    let regenerated = RunReport::from_trace(&trace)?;
    let v = &regenerated.validation;
    let mut s = format!(
        "{}: {} steps valid ({} scales evicted, {} expansions, {} skips)\n",
        trace_path.display(),
        v.steps,
        v.evicted_scales,
        v.expansions,
        v.skipped_exceeds_cmax + v.skipped_exceeds_budget
    );
    if let Some(rp) = report_path {
        let stored = read_report(rp)?.deterministic();
        if stored != regenerated {
            let a = serde_json::to_value(&stored)?;
            let b = serde_json::to_value(&regenerated)?;
            let field = match (&a, &b) {
                (serde_json::Value::Object(x), serde_json::Value::Object(y)) => x
                    .iter()
                    .find(|(k, v)| y.get(*k) != Some(v))
                    .map(|(k, _)| k.clone())
                    .unwrap_or_else(|| "<unknown>".into()),
                _ => "<root>".into(),
            };
            return Err(CliError::Invariant(format!(
                "report {} does not match its trace (field `{field}`)",
                rp.display()
            )));
        }
        s.push_str(&format!(
            "{}: matches the regenerated report\n",
            rp.display()
        ));
    }
    Ok(s)
}
