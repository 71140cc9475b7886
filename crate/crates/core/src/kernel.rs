//! Dense 64-bit numeric kernel shared by the rest of the crate.
//!
//! Everything here is a pure function over immutable inputs. Matrices are
//! row-major `f64`; spatial maps are `(row, col, channel)` with the channel
//! index fastest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copies columns `start..start + width` into a new matrix.
    pub fn column_block(&self, start: usize, width: usize) -> Result<Matrix> {
        if start + width > self.cols {
            return Err(Error::Shape(format!(
                "column block {start}..{} out of {} columns",
                start + width,
                self.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        Ok(out)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack<'a, I>(parts: I) -> Result<Matrix>
    where
        I: IntoIterator<Item = &'a Matrix>,
    {
        let mut cols = None;
        let mut rows = 0;
        let mut data = Vec::new();
        for m in parts {
            match cols {
                None => cols = Some(m.cols),
                Some(c) if c != m.cols => {
                    return Err(Error::Shape(format!(
                        "vstack of {c} and {} columns",
                        m.cols
                    )))
                }
                _ => {}
            }
            rows += m.rows;
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix {
            rows,
            cols: cols.unwrap_or(0),
            data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(
                "max_abs_diff of differently shaped matrices".into(),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_transposed {}x{} by ({}x{})^T",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// Row-wise softmax of `m / temperature`, stabilized by subtracting each
/// row's maximum.
pub fn softmax_rows(m: &Matrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Numeric(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if !m.is_finite() {
        return Err(Error::Numeric(
            "softmax input contains non-finite values".into(),
        ));
    }
    let mut out = m.clone();
    for r in 0..m.rows {
        softmax_in_place(out.row_mut(r), temperature);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// A `h x w` grid with `d` channels per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<f64>,
}

impl SpatialMap {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::Shape(format!(
                "spatial map {h}x{w}x{d} has a zero extent"
            )));
        }
        if data.len() != h * w * d {
            return Err(Error::Shape(format!(
                "spatial map {h}x{w}x{d} needs {} values, got {}",
                h * w * d,
                data.len()
            )));
        }
        Ok(Self { h, w, d, data })
    }

    /// Interprets a `(h*w) x d` token matrix as a grid in raster order.
    pub fn from_tokens(tokens: &Matrix, h: usize, w: usize) -> Result<Self> {
        if tokens.rows() != h * w {
            return Err(Error::Shape(format!(
                "{} tokens cannot form a {h}x{w} grid",
                tokens.rows()
            )));
        }
        Self::new(h, w, tokens.cols(), tokens.data().to_vec())
    }

    pub fn into_tokens(self) -> Matrix {
        Matrix {
            rows: self.h * self.w,
            cols: self.d,
            data: self.data,
        }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * self.w + c) * self.d + ch]
    }
}

/// Source coordinate of output index `i` under the align-corners convention.
#[inline]
fn align_corners_coord(i: usize, src: usize, dst: usize) -> f64 {
    if dst <= 1 {
        0.0
    } else {
        i as f64 * (src - 1) as f64 / (dst - 1) as f64
    }
}

/// Align-corners bilinear resize, applied per channel.
///
/// Corner cells of the output sample the corner cells of the source
/// exactly; a `1x1` source broadcasts to every output cell.
pub fn bilinear_resize(src: &SpatialMap, target_h: usize, target_w: usize) -> Result<SpatialMap> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Shape(format!(
            "resize target {target_h}x{target_w} has a zero extent"
        )));
    }
    let d = src.d;
    let mut out = vec![0.0; target_h * target_w * d];
    for r in 0..target_h {
        let y = align_corners_coord(r, src.h, target_h);
        let y0 = (y.floor() as usize).min(src.h - 1);
        let y1 = (y0 + 1).min(src.h - 1);
        let fy = y - y0 as f64;
        for c in 0..target_w {
            let x = align_corners_coord(c, src.w, target_w);
            let x0 = (x.floor() as usize).min(src.w - 1);
            let x1 = (x0 + 1).min(src.w - 1);
            let fx = x - x0 as f64;
            let base = (r * target_w + c) * d;
            for ch in 0..d {
                let top = src.get(y0, x0, ch) * (1.0 - fx) + src.get(y0, x1, ch) * fx;
                let bottom = src.get(y1, x0, ch) * (1.0 - fx) + src.get(y1, x1, ch) * fx;
                out[base + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    SpatialMap::new(target_h, target_w, d, out)
}

/// SplitMix64 (Steele, Lea and Flood, 2014).
///
/// State advances by `0x9E3779B97F4A7C15`; each output is the state passed
/// through the variant-13 finalizer:
///
/// ```text
/// z = state
/// z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
/// z = (z ^ (z >> 27)) * 0x94D049BB133111EB
/// z ^ (z >> 31)
/// ```
///
/// Uniform doubles take the top 53 bits: `(x >> 11) * 2^-53`, giving `[0, 1)`.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(Self::GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    /// Uniform on `[-1, 1)`.
    Uniform,
    /// Standard normal via Box-Muller, both outputs of each pair used in order.
    Gaussian,
}

/// Fills a `rows x cols` matrix from a SplitMix64 stream seeded with `seed`.
///
/// Gaussian draws use `u1 = 1 - next_f64()` (so `u1` is in `(0, 1]`) and
/// `u2 = next_f64()`, emitting `r cos(2 pi u2)` then `r sin(2 pi u2)` with
/// `r = sqrt(-2 ln u1)`.
pub fn seeded_init(seed: u64, rows: usize, cols: usize, dist: Distribution) -> Matrix {
    let mut rng = SplitMix64::new(seed);
    let n = rows * cols;
    let mut data = Vec::with_capacity(n);
    match dist {
        Distribution::Uniform => {
            data.extend((0..n).map(|_| 2.0 * rng.next_f64() - 1.0));
        }
        Distribution::Gaussian => {
            while data.len() < n {
                let u1 = 1.0 - rng.next_f64();
                let u2 = rng.next_f64();
                let r = (-2.0 * u1.ln()).sqrt();
                let theta = 2.0 * std::f64::consts::PI * u2;
                data.push(r * theta.cos());
                if data.len() < n {
                    data.push(r * theta.sin());
                }
            }
        }
    }
    Matrix { rows, cols, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = seeded_init(3, 3, 4, Distribution::Uniform);
        assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);
        let z = matmul(&Matrix::zeros(2, 3), &a).unwrap();
        assert_eq!(z, Matrix::zeros(2, 4));
    }

    #[test]
    fn matmul_hand_example() {
        let out = matmul(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), &m(&[&[0.0], &[1.0]])).unwrap();
        assert_eq!(out, m(&[&[2.0], &[4.0]]));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = seeded_init(11, 8, 8, Distribution::Gaussian);
        let b = seeded_init(12, 8, 8, Distribution::Gaussian);
        let got = matmul(&a, &b).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let mut s = 0.0;
                for k in 0..8 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((got.get(i, j) - s).abs() < 1e-9);
            }
        }
        let bt = b.transpose();
        let via_t = matmul_transposed(&a, &bt).unwrap();
        assert!(via_t.max_abs_diff(&got).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&m(&[&[0.0, 0.0, 0.0]]), 1.0).unwrap();
        for v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_rows(&m(&[&[1000.0, 0.0]]), 1.0).unwrap();
        assert!(s.is_finite());
        assert!((s.get(0, 0) - 1.0).abs() < 1e-12 && s.get(0, 1) < 1e-300);
        let s = softmax_rows(&m(&[&[2f64.ln(), 0.0]]), 1.0).unwrap();
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < 1e-9);
        assert!((s.get(0, 1) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(
            softmax_rows(&m(&[&[f64::NAN, 0.0]]), 1.0),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            softmax_rows(&m(&[&[0.0]]), 0.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn resize_constant_and_single_point() {
        let src = SpatialMap::new(3, 2, 2, vec![4.25; 12]).unwrap();
        let out = bilinear_resize(&src, 5, 7).unwrap();
        assert!(out.data().iter().all(|&v| v == 4.25));

        let one = SpatialMap::new(1, 1, 1, vec![-2.5]).unwrap();
        let out = bilinear_resize(&one, 4, 4).unwrap();
        assert_eq!(out.data(), &[-2.5; 16]);
    }

    #[test]
    fn resize_2x2_to_3x3_center() {
        let src = SpatialMap::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let out = bilinear_resize(&src, 3, 3).unwrap();
        assert!((out.get(1, 1, 0) - 1.5).abs() < 1e-15);
        assert_eq!(out.get(0, 0, 0), 0.0);
        assert_eq!(out.get(2, 2, 0), 3.0);
    }

    #[test]
    fn resize_zero_target() {
        let src = SpatialMap::new(1, 1, 1, vec![1.0]).unwrap();
        assert!(matches!(bilinear_resize(&src, 0, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn seeded_init_determinism() {
        let a = seeded_init(42, 5, 7, Distribution::Gaussian);
        let b = seeded_init(42, 5, 7, Distribution::Gaussian);
        assert_eq!(a.data(), b.data());
        let c = seeded_init(43, 5, 7, Distribution::Gaussian);
        assert_ne!(a.data(), c.data());
        let u = seeded_init(1, 10, 10, Distribution::Uniform);
        assert!(u.data().iter().all(|v| (-1.0..1.0).contains(v)));
    }

    #[test]
    fn splitmix_reference_values() {
        // Published SplitMix64 outputs for seed 1234567.
        let mut rng = SplitMix64::new(1234567);
        let expected = [
            6457827717110365317u64,
            3203168211198807973,
            9817491932198370423,
            4593380528125082431,
            16408922859458223821,
        ];
        for e in expected {
            assert_eq!(rng.next_u64(), e);
        }
    }

    #[test]
    fn gaussian_mean_near_zero() {
        let g = seeded_init(0, 1, 10_000, Distribution::Gaussian);
        let mean = g.data().iter().sum::<f64>() / 10_000.0;
        let var = g.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10_000.0;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..6,
            cols in 1usize..9,
            seed in any::<u64>(),
            scale in 0.1f64..500.0,
            temp in 0.05f64..10.0,
        ) {
            let mut x = seeded_init(seed, rows, cols, Distribution::Gaussian);
            x.data_mut().iter_mut().for_each(|v| *v *= scale);
            let s = softmax_rows(&x, temp).unwrap();
            for r in 0..rows {
                let sum: f64 = s.row(r).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
                prop_assert!(s.row(r).iter().all(|v| *v >= 0.0));
                // order preserving
                for a in 0..cols {
                    for b in 0..cols {
                        if x.get(r, a) < x.get(r, b) {
                            prop_assert!(s.get(r, a) <= s.get(r, b));
                        }
                    }
                }
            }
        }

        #[test]
        fn resize_identity_and_convexity(
            h in 1usize..7, w in 1usize..7, d in 1usize..3,
            th in 1usize..9, tw in 1usize..9,
            seed in any::<u64>(),
        ) {
            let data = seeded_init(seed, 1, h * w * d, Distribution::Gaussian).into_data();
            let src = SpatialMap::new(h, w, d, data).unwrap();
            let same = bilinear_resize(&src, h, w).unwrap();
            prop_assert_eq!(same.data(), src.data());

            let out = bilinear_resize(&src, th, tw).unwrap();
            for ch in 0..d {
                let vals: Vec<f64> = (0..h * w).map(|i| src.data()[i * d + ch]).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for i in 0..th * tw {
                    let v = out.data()[i * d + ch];
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }
}
