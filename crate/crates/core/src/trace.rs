//! JSON-lines encoding of a generation trace, and replay of its cache
//! decisions without the model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cache::{
    validate_records, BlockShape, FleetSetup, PolicyCache, StepRecord, ValidationSummary,
};
use crate::error::{Error, Result};
use crate::model::{GenerationTrace, LayerDensity, ScaleRecord, SimilarityRecord, ToyModelConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub schema_version: u32,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub model: ToyModelConfig,
    pub setup: FleetSetup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceLine {
    Header(TraceHeader),
    Step(StepRecord),
    Scale(ScaleRecord),
    Similarity(SimilarityRecord),
    Density(LayerDensity),
}

fn encode(line: &TraceLine, out: &mut String) -> Result<()> {
    let s = serde_json::to_string(line).map_err(|e| Error::Format(e.to_string()))?;
    out.push_str(&s);
    out.push('\n');
    Ok(())
}

impl GenerationTrace {
    /// One header line, then steps, scales, similarities and densities in
    /// generation order.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        encode(
            &TraceLine::Header(TraceHeader {
                schema_version: SCHEMA_VERSION,
                meta: self.meta.clone(),
                model: self.model.clone(),
                setup: self.setup.clone(),
            }),
            &mut out,
        )?;
        for s in &self.steps {
            encode(&TraceLine::Step(s.clone()), &mut out)?;
        }
        for s in &self.scales {
            encode(&TraceLine::Scale(s.clone()), &mut out)?;
        }
        for s in &self.similarities {
            encode(&TraceLine::Similarity(s.clone()), &mut out)?;
        }
        for d in &self.densities {
            encode(&TraceLine::Density(d.clone()), &mut out)?;
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::Format("empty trace".into()))?;
        let header = match serde_json::from_str::<TraceLine>(first) {
            Ok(TraceLine::Header(h)) => h,
            Ok(_) => return Err(Error::Format("first line is not a header".into())),
            Err(e) => return Err(Error::Format(format!("line 1: {e}"))),
        };
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "schema version {} (expected {SCHEMA_VERSION})",
                header.schema_version
            )));
        }
        let mut trace = GenerationTrace {
            meta: header.meta,
            model: header.model,
            setup: header.setup,
            steps: Vec::new(),
            scales: Vec::new(),
            similarities: Vec::new(),
            densities: Vec::new(),
        };
        for (i, line) in lines {
            match serde_json::from_str::<TraceLine>(line) {
                Ok(TraceLine::Header(_)) => {
                    return Err(Error::Format(format!("line {}: second header", i + 1)))
                }
                Ok(TraceLine::Step(s)) => trace.steps.push(s),
                Ok(TraceLine::Scale(s)) => trace.scales.push(s),
                Ok(TraceLine::Similarity(s)) => trace.similarities.push(s),
                Ok(TraceLine::Density(d)) => trace.densities.push(d),
                Err(e) => return Err(Error::Format(format!("line {}: {e}", i + 1))),
            }
        }
        Ok(trace)
    }
}

/// Re-runs the recorded cache decisions on size-only blocks and checks that
/// each step reproduces the same decision, contents and threshold.
pub fn replay(trace: &GenerationTrace) -> Result<()> {
    let setup = &trace.setup;
    let mut caches: Vec<PolicyCache<BlockShape>> = setup.build();
    for scale in setup.schedule.scales() {
        let steps: Vec<&StepRecord> = trace.steps.iter().filter(|s| s.scale == scale).collect();
        if steps.len() != setup.n_layers {
            return Err(Error::Invariant(format!(
                "replay: {} step records at scale {scale} for {} layers",
                steps.len(),
                setup.n_layers
            )));
        }
        let mut sims = vec![None; setup.n_layers];
        for s in &steps {
            if s.layer >= setup.n_layers {
                return Err(Error::Invariant(format!(
                    "replay: layer {} out of range",
                    s.layer
                )));
            }
            sims[s.layer] = s.similarity;
        }
        let theta = setup.resolve_theta(&sims);
        let side = setup.schedule.side(scale);
        for s in steps {
            if s.theta != theta {
                return Err(Error::Invariant(format!(
                    "replay: threshold at layer {} scale {scale} is {:?}, recomputed {:?}",
                    s.layer, s.theta, theta
                )));
            }
            let cache = &mut caches[s.layer];
            let decision = cache.commit(
                BlockShape { scale, side },
                s.similarity,
                theta.unwrap_or(f64::MIN),
            )?;
            if decision.kind != s.decision
                || cache.cached_scales() != s.cached_scales
                || cache.budget() != s.budget
            {
                return Err(Error::Invariant(format!(
                    "replay: layer {} scale {scale} diverges from the recorded decision",
                    s.layer
                )));
            }
        }
    }
    Ok(())
}

/// Structural checks on the recorded steps plus a decision replay.
pub fn verify_trace(trace: &GenerationTrace) -> Result<ValidationSummary> {
    if trace.setup.schedule != trace.model.schedule || trace.setup.n_layers != trace.model.n_layers
    {
        return Err(Error::Invariant(
            "trace setup disagrees with its model".into(),
        ));
    }
    let summary = validate_records(&trace.setup, &trace.steps)?;
    replay(trace)?;
    if trace.scales.len() != trace.setup.schedule.len() {
        return Err(Error::Invariant(format!(
            "{} scale records for {} scales",
            trace.scales.len(),
            trace.setup.schedule.len()
        )));
    }
    for (i, s) in trace.scales.iter().enumerate() {
        let side = trace.setup.schedule.side(i + 1);
        if s.scale != i + 1 || s.side != side || s.tokens.len() != side * side {
            return Err(Error::Invariant(format!(
                "scale record {} has the wrong shape",
                i + 1
            )));
        }
        if s.tokens
            .iter()
            .any(|&t| t as usize >= trace.model.vocab_size)
        {
            return Err(Error::Invariant(format!(
                "scale {} holds a token outside the vocabulary",
                i + 1
            )));
        }
    }
    Ok(summary)
}
