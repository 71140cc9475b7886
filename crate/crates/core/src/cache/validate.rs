//! Post-hoc checking of recorded cache steps.
//!
//! The validator re-derives every step from the recorded similarity and
//! threshold with its own bookkeeping (it does not call the policy code) and
//! checks the named cache invariants along the way. [`simulate`] is the
//! other side: it produces records by running the policy code itself.

use serde::{Deserialize, Serialize};

use crate::cache::{BlockShape, DecisionKind, FleetSetup, PolicyCache, PolicyKind, ScaleBlock};
use crate::error::{Error, Result};
use crate::schedule::scale_groups;

/// One `(layer, scale)` caching step as written to a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub layer: usize,
    pub scale: usize,
    pub tokens: usize,
    pub decision: DecisionKind,
    pub similarity: Option<f64>,
    pub theta: Option<f64>,
    /// Budget after the step; `None` for unbounded policies.
    pub budget: Option<usize>,
    /// Scales held after the step, in insertion order.
    pub cached_scales: Vec<usize>,
    pub cached_tokens: usize,
    /// Tokens attended to during the step.
    pub context_tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub steps: usize,
    pub evicted_scales: usize,
    pub expansions: usize,
    pub skipped_exceeds_cmax: usize,
    pub skipped_exceeds_budget: usize,
}

fn violation(layer: usize, scale: usize, what: &str, detail: String) -> Error {
    Error::Invariant(format!("{what} (layer {layer}, scale {scale}): {detail}"))
}

/// Drives size-only caches with a similarity stream, `scores[scale - 1][layer]`
/// (row 0 is ignored: scale 1 has no predecessor), resolving the threshold
/// per scale as generation would, and records every step.
pub fn simulate(setup: &FleetSetup, scores: &[Vec<f64>]) -> Result<Vec<StepRecord>> {
    if scores.len() != setup.schedule.len() || scores.iter().any(|r| r.len() != setup.n_layers) {
        return Err(Error::Shape(format!(
            "similarity stream must be {} scales x {} layers",
            setup.schedule.len(),
            setup.n_layers
        )));
    }
    let mut out = Vec::with_capacity(setup.schedule.len() * setup.n_layers);
    let mut caches: Vec<PolicyCache<BlockShape>> = setup.build();
    for scale in setup.schedule.scales() {
        let block = BlockShape {
            scale,
            side: setup.schedule.side(scale),
        };
        let sims: Vec<Option<f64>> = scores[scale - 1]
            .iter()
            .map(|&s| (scale > 1).then_some(s))
            .collect();
        let theta = setup.resolve_theta(&sims);
        for (layer, c) in caches.iter_mut().enumerate() {
            let context_tokens = c.context(&block).iter().map(|b| b.tokens()).sum();
            let d = c.commit(block, sims[layer], theta.unwrap_or(f64::MIN))?;
            out.push(StepRecord {
                layer,
                scale,
                tokens: block.tokens(),
                decision: d.kind,
                similarity: sims[layer],
                theta,
                budget: c.budget(),
                cached_scales: c.cached_scales(),
                cached_tokens: c.cached_tokens(),
                context_tokens,
            });
        }
    }
    Ok(out)
}

/// Checks every record of a trace against `setup`.
pub fn validate_records(setup: &FleetSetup, records: &[StepRecord]) -> Result<ValidationSummary> {
    let mut summary = ValidationSummary::default();
    for layer in 0..setup.n_layers {
        let layer_records: Vec<&StepRecord> = records.iter().filter(|r| r.layer == layer).collect();
        validate_layer(setup, layer, &layer_records, &mut summary)?;
    }
    if let Some(r) = records.iter().find(|r| r.layer >= setup.n_layers) {
        return Err(violation(
            r.layer,
            r.scale,
            "layer range",
            format!("fleet has {} layers", setup.n_layers),
        ));
    }
    Ok(summary)
}

struct Expected {
    decision: DecisionKind,
    held: Vec<usize>,
    budget: Option<usize>,
}

fn validate_layer(
    setup: &FleetSetup,
    layer: usize,
    records: &[&StepRecord],
    summary: &mut ValidationSummary,
) -> Result<()> {
    let sched = &setup.schedule;
    let spec = &setup.spec;
    let cds = spec.condensed_count;
    let tok = |s: usize| sched.tokens(s);

    let (adaptive, initial_budget) = match setup.policy {
        PolicyKind::AmsKv => (true, Some(spec.c_min)),
        PolicyKind::StaticAlloc { .. } => {
            let b = if setup.large_layers.contains(&layer) {
                spec.c_max
            } else {
                spec.c_min
            };
            (false, Some(b))
        }
        PolicyKind::SlidingWindow { window } => (false, Some(window)),
        PolicyKind::SinkWindow { sink, window } => (false, Some(sink + window)),
        PolicyKind::FullCache | PolicyKind::Ablation { .. } => (false, None),
    };
    let (c_min, c_max) = match setup.policy {
        PolicyKind::StaticAlloc { .. } => (initial_budget.unwrap(), initial_budget.unwrap()),
        _ => (spec.c_min, spec.c_max),
    };

    let mut held: Vec<usize> = Vec::new();
    let mut budget = initial_budget;
    let mut expansions = 0;
    let mut pinned = 0usize; // window policies: number of pinned leading scales
    let mut pinning = true;

    for (i, rec) in records.iter().enumerate() {
        let scale = rec.scale;
        if scale != i + 1 || scale > sched.len() {
            return Err(violation(
                layer,
                scale,
                "scale order",
                format!("expected scale {}", i + 1),
            ));
        }
        if rec.tokens != tok(scale) {
            return Err(violation(
                layer,
                scale,
                "token count",
                format!("{} != {}", rec.tokens, tok(scale)),
            ));
        }
        let held_tokens: usize = held.iter().map(|&s| tok(s)).sum();

        let visible: usize = match setup.policy {
            PolicyKind::Ablation { drop } => {
                let groups = scale_groups(sched, scale, cds, setup.n_local);
                held.iter()
                    .filter(|&&s| !groups.contains(drop, s))
                    .map(|&s| tok(s))
                    .sum()
            }
            _ => held_tokens,
        };
        if rec.context_tokens != visible + rec.tokens {
            return Err(violation(
                layer,
                scale,
                "context",
                format!(
                    "recorded {} tokens, expected {}",
                    rec.context_tokens,
                    visible + rec.tokens
                ),
            ));
        }

        let exp = match setup.policy {
            PolicyKind::AmsKv | PolicyKind::StaticAlloc { .. } => {
                let b = budget.unwrap();
                let t = rec.tokens;
                if t > c_max {
                    Expected {
                        decision: DecisionKind::SkippedExceedsCmax,
                        held: held.clone(),
                        budget,
                    }
                } else if held_tokens + t <= b {
                    let mut h = held.clone();
                    h.push(scale);
                    Expected {
                        decision: DecisionKind::Cached,
                        held: h,
                        budget,
                    }
                } else {
                    let mut nb = b;
                    let mut expanded = false;
                    if adaptive && b == c_min {
                        let (Some(s), Some(theta)) = (rec.similarity, rec.theta) else {
                            return Err(violation(
                                layer,
                                scale,
                                "similarity guard",
                                "overflow without similarity and threshold".into(),
                            ));
                        };
                        if s < theta && c_max > c_min {
                            nb = c_max;
                            expanded = true;
                        }
                    }
                    if t > nb {
                        Expected {
                            decision: DecisionKind::SkippedExceedsBudget,
                            held: held.clone(),
                            budget: Some(nb),
                        }
                    } else {
                        let mut h = held.clone();
                        h.push(scale);
                        let mut size = held_tokens + t;
                        let mut evicted = Vec::new();
                        while size > nb {
                            let Some(pos) = h.iter().position(|&s| s > cds) else {
                                return Err(violation(
                                    layer,
                                    scale,
                                    "condensed fit",
                                    "condensed scales exceed the budget".into(),
                                ));
                            };
                            let s = h.remove(pos);
                            size -= tok(s);
                            evicted.push(s);
                        }
                        let decision = if expanded {
                            DecisionKind::ExpandedThenCached { evicted }
                        } else {
                            DecisionKind::CachedWithEviction { evicted }
                        };
                        Expected {
                            decision,
                            held: h,
                            budget: Some(nb),
                        }
                    }
                }
            }
            PolicyKind::FullCache | PolicyKind::Ablation { .. } => {
                let mut h = held.clone();
                h.push(scale);
                Expected {
                    decision: DecisionKind::Cached,
                    held: h,
                    budget: None,
                }
            }
            PolicyKind::SlidingWindow { window } | PolicyKind::SinkWindow { window, .. } => {
                let sink = match setup.policy {
                    PolicyKind::SinkWindow { sink, .. } => sink,
                    _ => 0,
                };
                let mut h = held.clone();
                let pinned_tokens: usize = h[..pinned].iter().map(|&s| tok(s)).sum();
                if pinning && pinned_tokens + rec.tokens <= sink {
                    h.push(scale);
                    pinned += 1;
                    Expected {
                        decision: DecisionKind::Cached,
                        held: h,
                        budget,
                    }
                } else {
                    pinning = false;
                    h.push(scale);
                    let mut evicted = Vec::new();
                    while h[pinned..].iter().map(|&s| tok(s)).sum::<usize>() > window {
                        evicted.push(h.remove(pinned));
                    }
                    let decision = if evicted.is_empty() {
                        DecisionKind::Cached
                    } else {
                        DecisionKind::CachedWithEviction { evicted }
                    };
                    Expected {
                        decision,
                        held: h,
                        budget,
                    }
                }
            }
        };

        // named invariants first so failures say what broke
        let after_tokens: usize = rec.cached_scales.iter().map(|&s| tok(s)).sum();
        if after_tokens != rec.cached_tokens {
            return Err(violation(
                layer,
                scale,
                "token bookkeeping",
                format!("{after_tokens} != {}", rec.cached_tokens),
            ));
        }
        if let Some(b) = rec.budget {
            if rec.cached_tokens > b {
                return Err(violation(
                    layer,
                    scale,
                    "budget exceeded",
                    format!("{} > {b}", rec.cached_tokens),
                ));
            }
        }
        if matches!(
            setup.policy,
            PolicyKind::AmsKv | PolicyKind::StaticAlloc { .. }
        ) {
            for &c in held.iter().filter(|&&s| s <= cds) {
                if !rec.cached_scales.contains(&c) {
                    return Err(violation(
                        layer,
                        scale,
                        "condensed pinning",
                        format!("scale {c} dropped"),
                    ));
                }
            }
            if rec.decision.evicted().iter().any(|&s| s <= cds) {
                return Err(violation(
                    layer,
                    scale,
                    "condensed pinning",
                    "condensed scale evicted".into(),
                ));
            }
            let (Some(prev), Some(now)) = (budget, rec.budget) else {
                return Err(violation(
                    layer,
                    scale,
                    "budget",
                    "bounded policy recorded no budget".into(),
                ));
            };
            if now < prev || (now != c_min && now != c_max) {
                return Err(violation(
                    layer,
                    scale,
                    "monotone expansion",
                    format!("budget {prev} -> {now}"),
                ));
            }
            if now != prev {
                expansions += 1;
                if expansions > 1 {
                    return Err(violation(
                        layer,
                        scale,
                        "monotone expansion",
                        "second expansion".into(),
                    ));
                }
            }
        }
        // FIFO: evicted scales leave in insertion order and are older than
        // every surviving non-pinned scale
        let ev = rec.decision.evicted();
        if ev.windows(2).any(|w| w[1] <= w[0]) {
            return Err(violation(
                layer,
                scale,
                "FIFO order",
                format!("evicted {ev:?}"),
            ));
        }
        let protected = match setup.policy {
            PolicyKind::AmsKv | PolicyKind::StaticAlloc { .. } => cds,
            _ => pinned,
        };
        if let Some(&newest) = ev.last() {
            if rec
                .cached_scales
                .iter()
                .any(|&s| s > protected && s < newest)
            {
                return Err(violation(
                    layer,
                    scale,
                    "FIFO order",
                    format!("kept a scale older than evicted {newest}"),
                ));
            }
        }

        if rec.decision != exp.decision {
            return Err(violation(
                layer,
                scale,
                "skip rule",
                format!("recorded {:?}, expected {:?}", rec.decision, exp.decision),
            ));
        }
        if rec.cached_scales != exp.held {
            return Err(violation(
                layer,
                scale,
                "cache contents",
                format!("recorded {:?}, expected {:?}", rec.cached_scales, exp.held),
            ));
        }
        if rec.budget != exp.budget {
            return Err(violation(
                layer,
                scale,
                "budget",
                format!("recorded {:?}, expected {:?}", rec.budget, exp.budget),
            ));
        }

        summary.steps += 1;
        summary.evicted_scales += ev.len();
        match rec.decision {
            DecisionKind::SkippedExceedsCmax => summary.skipped_exceeds_cmax += 1,
            DecisionKind::SkippedExceedsBudget => summary.skipped_exceeds_budget += 1,
            DecisionKind::ExpandedThenCached { .. } => summary.expansions += 1,
            _ => {}
        }
        held = exp.held;
        budget = exp.budget;
    }
    Ok(())
}
