//! A small seeded next-scale transformer used to drive the cache policies
//! with real attention.
//!
//! Each scale's input is the previous scale's token embeddings, bilinearly
//! upsampled to the new grid, plus a fixed positional signal. Layers are
//! pre-norm single-attention blocks with a residual connection; tokens are
//! chosen greedily from an output head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attn::{
    attention_density, block_attention, compare_outputs, inter_scale_similarity, DensityTable,
    FidelityReport, ScaleFidelity, Similarity,
};
use crate::cache::{FleetSetup, KvBlock, PolicyCache, PolicyKind, ScaleBlock, StepRecord};
use crate::error::{Error, Result};
use crate::kernel::{
    bilinear_resize, matmul, seeded_init, Distribution, Matrix, SpatialMap, SplitMix64,
};
use crate::schedule::{BudgetSpec, ScaleSchedule};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub schedule: ScaleSchedule,
    pub seed: u64,
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::Config(format!(
                "n_layers must be at least 2, got {}",
                self.n_layers
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.n_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(
                "n_heads and head_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ToyModelConfig,
    /// `vocab x d_model`; row 0 doubles as the start embedding of scale 1.
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    /// `d_model x vocab`.
    pub head: Matrix,
}

/// Seed of the `index`-th weight matrix.
fn matrix_seed(seed: u64, index: u64) -> u64 {
    SplitMix64::new(seed ^ index.wrapping_mul(SplitMix64::GAMMA)).next_u64()
}

fn scaled(seed: u64, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut m = seeded_init(seed, rows, cols, Distribution::Gaussian);
    m.data_mut().iter_mut().for_each(|v| *v *= scale);
    m
}

pub fn init_model(config: &ToyModelConfig) -> Result<ToyModel> {
    config.validate()?;
    let d = config.d_model();
    let inv = 1.0 / (d as f64).sqrt();
    let embedding = scaled(matrix_seed(config.seed, 0), config.vocab_size, d, 1.0);
    let head = scaled(matrix_seed(config.seed, 1), d, config.vocab_size, inv);
    let layers = (0..config.n_layers as u64)
        .map(|l| {
            let s = |i: u64| matrix_seed(config.seed, 2 + 4 * l + i);
            LayerWeights {
                wq: scaled(s(0), d, d, inv),
                wk: scaled(s(1), d, d, inv),
                wv: scaled(s(2), d, d, inv),
                wo: scaled(s(3), d, d, 0.5 * inv),
            }
        })
        .collect();
    Ok(ToyModel {
        config: config.clone(),
        embedding,
        layers,
        head,
    })
}

impl ToyModel {
    /// Number of weight matrices: four projections per layer, the embedding
    /// and the output head.
    pub fn weight_count(&self) -> usize {
        4 * self.layers.len() + 2
    }
}

fn rms_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Fixed sinusoidal signal over normalized grid coordinates and the scale
/// index, `side^2 x d`.
fn positional(scale: usize, side: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(side * side, d);
    for r in 0..side {
        let y = (r as f64 + 0.5) / side as f64;
        for c in 0..side {
            let x = (c as f64 + 0.5) / side as f64;
            let row = m.row_mut(r * side + c);
            for (ch, v) in row.iter_mut().enumerate() {
                let k = std::f64::consts::PI * (ch / 4 + 1) as f64;
                let base = match ch % 4 {
                    0 => (k * y).sin(),
                    1 => (k * y).cos(),
                    2 => (k * x).sin(),
                    _ => (k * x).cos(),
                };
                *v = 0.5 * base + 0.1 * (scale as f64 * (ch + 1) as f64).sin();
            }
        }
    }
    m
}

fn add_in_place(a: &mut Matrix, b: &Matrix) {
    a.data_mut()
        .iter_mut()
        .zip(b.data())
        .for_each(|(x, y)| *x += y);
}

fn split_heads(m: &Matrix, n_heads: usize, head_dim: usize) -> Result<Vec<Matrix>> {
    (0..n_heads)
        .map(|h| m.column_block(h * head_dim, head_dim))
        .collect()
}

fn merge_heads(heads: &[Matrix]) -> Matrix {
    let rows = heads[0].rows();
    let hd = heads[0].cols();
    let mut out = Matrix::zeros(rows, hd * heads.len());
    for (h, m) in heads.iter().enumerate() {
        for r in 0..rows {
            out.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(m.row(r));
        }
    }
    out
}

/// Previous-scale keys of one layer, kept for one step for the similarity
/// check whether or not the cache retained them.
#[derive(Debug, Clone)]
pub struct TransientKeys {
    pub side: usize,
    pub keys: Vec<Matrix>,
}

/// Similarity of a layer's fresh keys to its previous-scale keys.
pub fn similarity_stream(
    keys: &[Matrix],
    side: usize,
    transient: Option<&TransientKeys>,
) -> Result<Similarity> {
    let prev =
        transient.ok_or_else(|| Error::Protocol("no previous-scale keys retained".into()))?;
    inter_scale_similarity(keys, side, &prev.keys, prev.side)
}

struct ScaleForward {
    hidden: Matrix,
    blocks: Vec<KvBlock>,
    attn: Vec<Matrix>,
    sims: Vec<Option<Similarity>>,
    context_tokens: Vec<usize>,
    densities: Vec<DensityTable>,
}

impl ToyModel {
    fn start_input(&self) -> Result<Matrix> {
        let d = self.config.d_model();
        let side = self.config.schedule.side(1);
        let data = self.embedding.row(0).repeat(side * side);
        let mut x = Matrix::new(side * side, d, data)?;
        add_in_place(&mut x, &positional(1, side, d));
        Ok(x)
    }

    /// Input of `scale` built from the tokens chosen at `scale - 1`.
    fn next_input(&self, tokens: &[u32], prev_side: usize, scale: usize) -> Result<Matrix> {
        let d = self.config.d_model();
        let mut emb = Matrix::zeros(tokens.len(), d);
        for (r, &t) in tokens.iter().enumerate() {
            emb.row_mut(r)
                .copy_from_slice(self.embedding.row(t as usize));
        }
        let side = self.config.schedule.side(scale);
        let map = SpatialMap::from_tokens(&emb, prev_side, prev_side)?;
        let mut x = bilinear_resize(&map, side, side)?.into_tokens();
        add_in_place(&mut x, &positional(scale, side, d));
        Ok(x)
    }

    fn forward_scale(
        &self,
        scale: usize,
        input: Matrix,
        caches: &[PolicyCache<KvBlock>],
        transients: &[Option<TransientKeys>],
        density: bool,
    ) -> Result<ScaleForward> {
        let cfg = &self.config;
        let side = cfg.schedule.side(scale);
        let mut x = input;
        let mut out = ScaleForward {
            hidden: Matrix::zeros(0, 0),
            blocks: Vec::with_capacity(cfg.n_layers),
            attn: Vec::with_capacity(cfg.n_layers),
            sims: Vec::with_capacity(cfg.n_layers),
            context_tokens: Vec::with_capacity(cfg.n_layers),
            densities: Vec::new(),
        };
        for (l, w) in self.layers.iter().enumerate() {
            let h = rms_norm(&x);
            let q = split_heads(&matmul(&h, &w.wq)?, cfg.n_heads, cfg.head_dim)?;
            let k = split_heads(&matmul(&h, &w.wk)?, cfg.n_heads, cfg.head_dim)?;
            let v = split_heads(&matmul(&h, &w.wv)?, cfg.n_heads, cfg.head_dim)?;
            let sim = match &transients[l] {
                Some(t) => Some(similarity_stream(&k, side, Some(t))?),
                None => None,
            };
            let block = KvBlock::new(scale, side, k, v)?;
            let ctx = caches[l].context(&block);
            let ctx_tokens = ctx.iter().map(|b| b.tokens()).sum();
            let att = block_attention(&q, &ctx, density)?;
            if let Some(slices) = &att.slices {
                out.densities
                    .push(attention_density(slices, &cfg.schedule)?);
            }
            let merged = merge_heads(&att.heads);
            let o = matmul(&merged, &w.wo)?;
            add_in_place(&mut x, &o);
            out.blocks.push(block);
            out.attn.push(merged);
            out.sims.push(sim);
            out.context_tokens.push(ctx_tokens);
        }
        if !x.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite hidden state at scale {scale}"
            )));
        }
        out.hidden = x;
        Ok(out)
    }

    fn choose_tokens(&self, hidden: &Matrix) -> Result<Vec<u32>> {
        let logits = matmul(&rms_norm(hidden), &self.head)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                // first maximum wins
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best as u32
            })
            .collect())
    }
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    /// Run a teacher-forced full-cache pass alongside and record fidelity.
    pub compare_oracle: bool,
    /// Width of the local scale group used by ablations.
    pub n_local: usize,
    /// Materialize attention slices and densities at this scale.
    pub density_scale: Option<usize>,
}

impl GenerateOptions {
    pub fn new() -> Self {
        Self {
            compare_oracle: false,
            n_local: 2,
            density_scale: None,
        }
    }

    pub fn with_oracle(mut self) -> Self {
        self.compare_oracle = true;
        self
    }

    pub fn with_density(mut self, scale: usize) -> Self {
        self.density_scale = Some(scale);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub scale: usize,
    pub side: usize,
    /// Greedy token grid in raster order.
    pub tokens: Vec<u32>,
    /// Classification threshold in force at this scale.
    pub theta: Option<f64>,
    pub fidelity: Option<ScaleFidelity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub layer: usize,
    pub scale: usize,
    pub score: f64,
    pub rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDensity {
    pub layer: usize,
    pub table: DensityTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    /// Free-form run metadata (label, config hash, ...), kept sorted.
    pub meta: BTreeMap<String, String>,
    pub model: ToyModelConfig,
    pub setup: FleetSetup,
    pub steps: Vec<StepRecord>,
    pub scales: Vec<ScaleRecord>,
    pub similarities: Vec<SimilarityRecord>,
    pub densities: Vec<LayerDensity>,
}

impl GenerationTrace {
    pub fn fidelity(&self) -> Option<FidelityReport> {
        let per_scale: Option<Vec<ScaleFidelity>> =
            self.scales.iter().map(|s| s.fidelity).collect();
        per_scale.map(|per_scale| FidelityReport { per_scale })
    }

    pub fn layer_steps(&self, layer: usize) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(move |s| s.layer == layer)
    }

    /// Mean similarity score of each layer over scales 2..K.
    pub fn mean_layer_similarity(&self) -> Vec<f64> {
        let n = self.setup.n_layers;
        let mut sum = vec![0.0; n];
        let mut cnt = vec![0usize; n];
        for s in &self.similarities {
            sum[s.layer] += s.score;
            cnt[s.layer] += 1;
        }
        sum.iter()
            .zip(&cnt)
            .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect()
    }
}

/// Generates every scale of the schedule under `policy`.
pub fn generate(
    model: &ToyModel,
    policy: PolicyKind,
    spec: &BudgetSpec,
    opts: &GenerateOptions,
) -> Result<GenerationTrace> {
    let cfg = &model.config;
    cfg.validate()?;
    let mut setup = FleetSetup::new(
        policy,
        *spec,
        cfg.schedule.clone(),
        cfg.n_layers,
        opts.n_local,
    )?;
    if let Some(j) = opts.density_scale {
        if j == 0 || j > cfg.schedule.len() {
            return Err(Error::Config(format!(
                "density scale {j} outside the schedule"
            )));
        }
    }
    if policy.needs_similarity_ranking() {
        // the ranking comes from an unconstrained pass, as an offline profile would
        let calib = generate(
            model,
            PolicyKind::FullCache,
            spec,
            &GenerateOptions {
                n_local: opts.n_local,
                ..GenerateOptions::new()
            },
        )?;
        setup = setup.with_similarity_ranking(&calib.mean_layer_similarity())?;
    }
    generate_with_setup(model, setup, opts)
}

/// Generation with an explicit fleet setup, e.g. one restored from a trace.
pub fn generate_with_setup(
    model: &ToyModel,
    setup: FleetSetup,
    opts: &GenerateOptions,
) -> Result<GenerationTrace> {
    let cfg = &model.config;
    if setup.schedule != cfg.schedule || setup.n_layers != cfg.n_layers {
        return Err(Error::Config("fleet setup does not match the model".into()));
    }
    let schedule = &cfg.schedule;
    let mut caches: Vec<PolicyCache<KvBlock>> = setup.build();
    let oracle_setup = FleetSetup {
        policy: PolicyKind::FullCache,
        ..setup.clone()
    };
    let mut oracle: Option<Vec<PolicyCache<KvBlock>>> =
        opts.compare_oracle.then(|| oracle_setup.build());
    let mut transients: Vec<Option<TransientKeys>> = vec![None; cfg.n_layers];
    let no_transients: Vec<Option<TransientKeys>> = vec![None; cfg.n_layers];

    let mut trace = GenerationTrace {
        meta: BTreeMap::new(),
        model: cfg.clone(),
        setup: setup.clone(),
        steps: Vec::new(),
        scales: Vec::new(),
        similarities: Vec::new(),
        densities: Vec::new(),
    };

    let mut input = model.start_input()?;
    for scale in schedule.scales() {
        let side = schedule.side(scale);
        let density = opts.density_scale == Some(scale);
        let fwd = model.forward_scale(scale, input.clone(), &caches, &transients, density)?;

        let fidelity = match oracle.as_mut() {
            Some(oc) => {
                let ofwd = model.forward_scale(scale, input, oc, &no_transients, false)?;
                let (rel_l2, cosine) = compare_outputs(&fwd.hidden, &ofwd.hidden)?;
                let mut max_diff: f64 = 0.0;
                for (a, b) in fwd.attn.iter().zip(&ofwd.attn) {
                    max_diff = max_diff.max(a.max_abs_diff(b)?);
                }
                for (c, b) in oc.iter_mut().zip(ofwd.blocks) {
                    c.commit(b, None, f64::MIN)?;
                }
                Some(ScaleFidelity {
                    scale,
                    rel_l2,
                    cosine,
                    max_attention_abs_diff: max_diff,
                })
            }
            None => None,
        };

        let scores: Vec<Option<f64>> = fwd
            .sims
            .iter()
            .map(|s| s.as_ref().map(|s| s.score))
            .collect();
        let theta = setup.resolve_theta(&scores);
        for (layer, block) in fwd.blocks.into_iter().enumerate() {
            transients[layer] = Some(TransientKeys {
                side,
                keys: block.keys().to_vec(),
            });
            let sim = scores[layer];
            let decision = caches[layer].commit(block, sim, theta.unwrap_or(f64::MIN))?;
            let c = &caches[layer];
            trace.steps.push(StepRecord {
                layer,
                scale,
                tokens: side * side,
                decision: decision.kind,
                similarity: sim,
                theta,
                budget: c.budget(),
                cached_scales: c.cached_scales(),
                cached_tokens: c.cached_tokens(),
                context_tokens: fwd.context_tokens[layer],
            });
            if let Some(s) = &fwd.sims[layer] {
                trace.similarities.push(SimilarityRecord {
                    layer,
                    scale,
                    score: s.score,
                    rms: s.rms,
                });
            }
        }
        for (layer, table) in fwd.densities.into_iter().enumerate() {
            trace.densities.push(LayerDensity { layer, table });
        }

        let tokens = model.choose_tokens(&fwd.hidden)?;
        if scale < schedule.len() {
            input = model.next_input(&tokens, side, scale + 1)?;
        } else {
            input = Matrix::zeros(0, 0);
        }
        trace.scales.push(ScaleRecord {
            scale,
            side,
            tokens,
            theta,
            fidelity,
        });
    }
    Ok(trace)
}
