//! Block-scale attention, the attention-density analyzer and the inter-scale
//! key similarity.

use serde::{Deserialize, Serialize};

use crate::cache::{KvBlock, ScaleBlock};
use crate::error::{Error, Result};
use crate::kernel::{bilinear_resize, dot, l2_norm, softmax_in_place, Matrix, SpatialMap};
use crate::schedule::ScaleSchedule;

/// Attention weights from the generating scale onto one context scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSlice {
    pub head: usize,
    /// Generating scale `j`.
    pub from_scale: usize,
    /// Attended scale `i`.
    pub to_scale: usize,
    /// `T_j x T_i` block of the row-normalized attention matrix.
    pub weights: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// One `T_j x head_dim` matrix per head.
    pub heads: Vec<Matrix>,
    pub slices: Option<Vec<AttentionSlice>>,
}

/// Softmax attention of `queries` (one matrix per head) over every token of
/// `context`. The last context block is the scale being generated; there is
/// no mask inside the context, so the current scale attends to itself
/// bidirectionally.
pub fn block_attention(
    queries: &[Matrix],
    context: &[&KvBlock],
    collect_slices: bool,
) -> Result<AttentionOutput> {
    let current = context
        .last()
        .ok_or_else(|| Error::Shape("attention context is empty".into()))?;
    let n_heads = queries.len();
    if n_heads == 0 {
        return Err(Error::Shape("no query heads".into()));
    }
    let head_dim = queries[0].cols();
    for b in context {
        if b.n_heads() != n_heads || b.head_dim() != head_dim {
            return Err(Error::Shape(format!(
                "context scale {} has {} heads of dim {}, queries have {n_heads} of dim {head_dim}",
                b.scale(),
                b.n_heads(),
                b.head_dim()
            )));
        }
    }
    let t_q = queries[0].rows();
    if queries
        .iter()
        .any(|q| q.rows() != t_q || q.cols() != head_dim)
    {
        return Err(Error::Shape("query heads differ in shape".into()));
    }
    let t_ctx: usize = context.iter().map(|b| b.tokens()).sum();
    let inv_sqrt = 1.0 / (head_dim as f64).sqrt();

    let mut heads = Vec::with_capacity(n_heads);
    let mut slices = collect_slices.then(Vec::new);
    let mut row = vec![0.0; t_ctx];
    for (h, q) in queries.iter().enumerate() {
        let mut out = Matrix::zeros(t_q, head_dim);
        let mut weights = collect_slices.then(|| Matrix::zeros(t_q, t_ctx));
        for p in 0..t_q {
            let qp = q.row(p);
            let mut off = 0;
            for b in context {
                let keys = &b.keys()[h];
                for k in 0..keys.rows() {
                    row[off + k] = dot(qp, keys.row(k)) * inv_sqrt;
                }
                off += keys.rows();
            }
            softmax_in_place(&mut row, 1.0);
            let out_row = out.row_mut(p);
            let mut off = 0;
            for b in context {
                let values = &b.values()[h];
                for k in 0..values.rows() {
                    let w = row[off + k];
                    for (o, v) in out_row.iter_mut().zip(values.row(k)) {
                        *o += w * v;
                    }
                }
                off += values.rows();
            }
            if let Some(wm) = weights.as_mut() {
                wm.row_mut(p).copy_from_slice(&row);
            }
        }
        if let (Some(all), Some(wm)) = (slices.as_mut(), weights) {
            let mut off = 0;
            for b in context {
                all.push(AttentionSlice {
                    head: h,
                    from_scale: current.scale(),
                    to_scale: b.scale(),
                    weights: wm.column_block(off, b.tokens())?,
                });
                off += b.tokens();
            }
        }
        heads.push(out);
    }
    Ok(AttentionOutput { heads, slices })
}

/// Attention over the complete history `blocks` (last block = current).
pub fn full_context_oracle(blocks: &[KvBlock], queries: &[Matrix]) -> Result<AttentionOutput> {
    let ctx: Vec<&KvBlock> = blocks.iter().collect();
    block_attention(queries, &ctx, false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityEntry {
    pub head: usize,
    pub scale: usize,
    pub value: f64,
}

/// `d_{i<-j} = (1 / T_i) * sum_p sum_q A^{(j->i)}_{p,q}` for every head and
/// attended scale `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityTable {
    pub target_scale: usize,
    pub target_tokens: usize,
    pub n_heads: usize,
    /// Sorted by `(head, scale)`.
    pub entries: Vec<DensityEntry>,
    /// `T_i` of every attended scale, indexed by `scale - 1`.
    pub scale_tokens: Vec<usize>,
}

impl DensityTable {
    pub fn value(&self, head: usize, scale: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.head == head && e.scale == scale)
            .map(|e| e.value)
    }

    /// `sum_i T_i d_{i<-j}` for one head; equals `T_j` when rows are normalized.
    pub fn mass(&self, head: usize) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.head == head)
            .map(|e| self.scale_tokens[e.scale - 1] as f64 * e.value)
            .sum()
    }

    /// Head-wise mean of several tables with the same target and heads.
    pub fn mean(tables: &[DensityTable]) -> Result<DensityTable> {
        let first = tables
            .first()
            .ok_or_else(|| Error::Coverage("no density tables".into()))?;
        let mut out = first.clone();
        for t in &tables[1..] {
            if t.target_scale != first.target_scale || t.entries.len() != first.entries.len() {
                return Err(Error::Coverage("density tables do not line up".into()));
            }
            for (o, e) in out.entries.iter_mut().zip(&t.entries) {
                o.value += e.value;
            }
        }
        let n = tables.len() as f64;
        out.entries.iter_mut().for_each(|e| e.value /= n);
        Ok(out)
    }
}

pub fn attention_density(
    slices: &[AttentionSlice],
    schedule: &ScaleSchedule,
) -> Result<DensityTable> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Coverage("no attention slices".into()))?;
    let target = first.from_scale;
    if target == 0 || target > schedule.len() {
        return Err(Error::Coverage(format!(
            "target scale {target} outside the schedule"
        )));
    }
    let n_heads = slices.iter().map(|s| s.head).max().unwrap() + 1;
    let mut sums: Vec<Option<f64>> = vec![None; n_heads * target];
    for s in slices {
        if s.from_scale != target {
            return Err(Error::Coverage(format!(
                "slice from scale {} mixed with target {target}",
                s.from_scale
            )));
        }
        if s.to_scale == 0 || s.to_scale > target {
            return Err(Error::Coverage(format!(
                "slice onto scale {} beyond target {target}",
                s.to_scale
            )));
        }
        let t_i = schedule.tokens(s.to_scale);
        if s.weights.cols() != t_i || s.weights.rows() != schedule.tokens(target) {
            return Err(Error::Shape(format!(
                "slice {}->{} is {}x{}",
                target,
                s.to_scale,
                s.weights.rows(),
                s.weights.cols()
            )));
        }
        let slot = &mut sums[s.head * target + s.to_scale - 1];
        if slot.is_some() {
            return Err(Error::Coverage(format!(
                "duplicate slice head {} scale {}",
                s.head, s.to_scale
            )));
        }
        *slot = Some(s.weights.data().iter().sum::<f64>() / t_i as f64);
    }
    let mut entries = Vec::with_capacity(sums.len());
    for head in 0..n_heads {
        for scale in 1..=target {
            let value = sums[head * target + scale - 1].ok_or_else(|| {
                Error::Coverage(format!("missing slice for head {head}, scale {scale}"))
            })?;
            entries.push(DensityEntry { head, scale, value });
        }
    }
    Ok(DensityTable {
        target_scale: target,
        target_tokens: schedule.tokens(target),
        n_heads,
        entries,
        scale_tokens: schedule.tokens_per_scale()[..target].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    /// `-||k_i - resize(k_{i-1})||_2` over all heads jointly.
    pub score: f64,
    /// Joint distance divided by `sqrt(element count)`, negated.
    pub rms: f64,
    pub per_head: Vec<f64>,
}

/// Negative L2 distance between the current scale's keys and the previous
/// scale's keys bilinearly resized to the current grid. Keys are given per
/// head as `side^2 x head_dim` matrices in raster order.
pub fn inter_scale_similarity(
    k_curr: &[Matrix],
    side_curr: usize,
    k_prev: &[Matrix],
    side_prev: usize,
) -> Result<Similarity> {
    if k_curr.len() != k_prev.len() || k_curr.is_empty() {
        return Err(Error::Shape(format!(
            "similarity over {} and {} heads",
            k_curr.len(),
            k_prev.len()
        )));
    }
    let mut per_head = Vec::with_capacity(k_curr.len());
    let mut total_sq = 0.0;
    let mut n = 0usize;
    for (cur, prev) in k_curr.iter().zip(k_prev) {
        if cur.cols() != prev.cols() {
            return Err(Error::Shape(format!(
                "head dims differ: {} vs {}",
                cur.cols(),
                prev.cols()
            )));
        }
        let map = SpatialMap::from_tokens(prev, side_prev, side_prev)?;
        let up = bilinear_resize(&map, side_curr, side_curr)?.into_tokens();
        if up.rows() != cur.rows() {
            return Err(Error::Shape(format!(
                "current keys have {} rows, expected {}",
                cur.rows(),
                up.rows()
            )));
        }
        let sq: f64 = cur
            .data()
            .iter()
            .zip(up.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        per_head.push(-sq.sqrt());
        total_sq += sq;
        n += cur.data().len();
    }
    let dist = total_sq.sqrt();
    Ok(Similarity {
        score: -dist,
        rms: -dist / (n as f64).sqrt(),
        per_head,
    })
}

/// Deviation of one scale's policy output from the oracle output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFidelity {
    pub scale: usize,
    pub rel_l2: f64,
    pub cosine: f64,
    /// Largest absolute difference of any layer's attention output.
    pub max_attention_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub per_scale: Vec<ScaleFidelity>,
}

impl FidelityReport {
    pub fn mean_rel_l2(&self) -> f64 {
        mean(self.per_scale.iter().map(|s| s.rel_l2))
    }

    pub fn mean_cosine(&self) -> f64 {
        mean(self.per_scale.iter().map(|s| s.cosine))
    }

    pub fn last(&self) -> Option<&ScaleFidelity> {
        self.per_scale.last()
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Relative L2 error and cosine similarity of `output` against `oracle`.
pub fn compare_outputs(output: &Matrix, oracle: &Matrix) -> Result<(f64, f64)> {
    if output.rows() != oracle.rows() || output.cols() != oracle.cols() {
        return Err(Error::Shape(
            "fidelity of differently shaped outputs".into(),
        ));
    }
    let diff: Vec<f64> = output
        .data()
        .iter()
        .zip(oracle.data())
        .map(|(a, b)| a - b)
        .collect();
    let err = l2_norm(&diff);
    let on = l2_norm(oracle.data());
    let pn = l2_norm(output.data());
    let rel = if on > 0.0 { err / on } else { err };
    let cos = if err == 0.0 {
        1.0
    } else if on == 0.0 || pn == 0.0 {
        0.0
    } else {
        (dot(output.data(), oracle.data()) / (on * pn)).clamp(-1.0, 1.0)
    };
    Ok((rel, cos))
}
