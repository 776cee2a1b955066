//! Uniqueness kernels, reconstruction error and the uniqueness bound.
//!
//! Pairwise uniqueness is `u(x, y) = 1 - cos(x, y)`, in `[0, 2]`. A token's
//! uniqueness is the mean of its row of the uniqueness graph, self-term
//! included, so the largest attainable value is `2 (N - 1) / N`.
//!
//! The reconstruction-side operations work on row-normalized copies of the
//! tokens. For unit rows, reconstructing every token from its most similar
//! selected token gives an error of exactly `2 * sum_j min_{i in S} u_ij`,
//! and a softmax-weighted reconstruction is bounded by
//! `sum_j 2 (1 - sum_i w_ij s_ij)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TokenMatrix;

/// Rows at or above this count build the uniqueness graph row-parallel.
const PARALLEL_ROWS: usize = 128;

/// Dot product accumulated in `f64` with four independent lanes.
///
/// The summation order is fixed, so every caller that goes through this
/// function gets bitwise identical results for the same inputs.
#[inline]
pub fn dot<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0].into() * y[0].into();
        acc[1] += x[1].into() * y[1].into();
        acc[2] += x[2].into() * y[2].into();
        acc[3] += x[3].into() * y[3].into();
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += (*x).into() * (*y).into();
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

#[inline]
pub fn norm<T: Copy + Into<f64>>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

/// `1 - dot / (na * nb)`, clamped into `[0, 2]` to absorb rounding.
#[inline]
pub(crate) fn uniqueness_from_dot(dot: f64, na: f64, nb: f64) -> f64 {
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// Pairwise uniqueness `1 - cos(x, y)`.
pub fn pairwise_uniqueness<T: Copy + Into<f64>>(x: &[T], y: &[T]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Shape(format!(
            "feature vectors of dims {} and {}",
            x.len(),
            y.len()
        )));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::DegenerateFeature);
    }
    Ok(uniqueness_from_dot(dot(x, y), nx, ny))
}

/// Euclidean norms of every row; errors on the first zero-norm row.
pub fn row_norms(tokens: &TokenMatrix) -> Result<Vec<f64>> {
    tokens
        .rows()
        .enumerate()
        .map(|(row, r)| match norm(r) {
            n if n > 0.0 => Ok(n),
            _ => Err(Error::DegenerateRow { row }),
        })
        .collect()
}

/// Symmetric `N x N` uniqueness graph with an exactly zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessMatrix {
    n: usize,
    data: Vec<f64>,
}

impl UniquenessMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Row means, summed in ascending column order.
    pub fn token_uniqueness(&self) -> UniquenessVector {
        UniquenessVector(
            (0..self.n)
                .map(|i| row_mean(self.row(i)))
                .collect(),
        )
    }
}

#[inline]
pub(crate) fn row_mean(row: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in row {
        s += v;
    }
    s / row.len() as f64
}

/// Per-token uniqueness, one entry per token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessVector(pub Vec<f64>);

impl UniquenessVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Token ids by descending uniqueness, ties to the lower id.
    pub fn descending_order(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.0.len()).collect();
        ids.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        ids
    }
}

/// Dot products of rows `a[r]` with rows `b[c]` for all eight pairs, each
/// accumulated in exactly the lane order of [`dot`] (bitwise equal).
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
fn dot2x4_avx(a: [&[f64]; 2], b: [&[f64]; 4]) -> [[f64; 4]; 2] {
    use std::arch::x86_64::*;
    let d = a[0].len();
    assert!(a.iter().chain(&b).all(|r| r.len() == d));
    let body = d - d % 4;
    let mut acc = [[_mm256_setzero_pd(); 4]; 2];
    let mut k = 0;
    while k < body {
        // SAFETY: every row has length `d` and `k + 4 <= body <= d`.
        unsafe {
            let x0 = _mm256_loadu_pd(a[0].as_ptr().add(k));
            let x1 = _mm256_loadu_pd(a[1].as_ptr().add(k));
            for c in 0..4 {
                let y = _mm256_loadu_pd(b[c].as_ptr().add(k));
                // Separate multiply and add, never fused, as in `dot`.
                acc[0][c] = _mm256_add_pd(acc[0][c], _mm256_mul_pd(x0, y));
                acc[1][c] = _mm256_add_pd(acc[1][c], _mm256_mul_pd(x1, y));
            }
        }
        k += 4;
    }
    let mut out = [[0.0; 4]; 2];
    for r in 0..2 {
        for c in 0..4 {
            let mut l = [0.0f64; 4];
            // SAFETY: `l` holds four f64.
            unsafe { _mm256_storeu_pd(l.as_mut_ptr(), acc[r][c]) };
            let mut tail = 0.0;
            for (x, y) in a[r][body..].iter().zip(&b[c][body..]) {
                tail += x * y;
            }
            out[r][c] = ((l[0] + l[1]) + (l[2] + l[3])) + tail;
        }
    }
    out
}

fn dot2x4(wide: bool, a: [&[f64]; 2], b: [&[f64]; 4]) -> [[f64; 4]; 2] {
    #[cfg(target_arch = "x86_64")]
    if wide {
        // SAFETY: `wide` is only true after runtime detection of AVX.
        return unsafe { dot2x4_avx(a, b) };
    }
    let _ = wide;
    a.map(|ar| b.map(|br| dot(ar, br)))
}

fn has_avx() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// Builds the uniqueness graph from precomputed row norms.
///
/// Rows are widened to `f64` once (exactly). The upper triangle is
/// evaluated in blocks of two rows against four, then mirrored tile by
/// tile. Every entry equals the one [`pairwise_uniqueness`] produces.
pub(crate) fn uniqueness_matrix_with_norms(tokens: &TokenMatrix, norms: &[f64]) -> UniquenessMatrix {
    let (n, d) = (tokens.n(), tokens.d());
    let wide: Vec<f64> = tokens.as_slice().iter().map(|&v| f64::from(v)).collect();
    let row = |i: usize| &wide[i * d..(i + 1) * d];
    let simd = has_avx();
    let u = |dt: f64, i: usize, j: usize| uniqueness_from_dot(dt, norms[i], norms[j]);

    // Fills the upper-triangle part (`j > i`) of rows `2b` and `2b + 1`.
    let pair_block = |(b, rows): (usize, &mut [f64])| {
        let (i0, i1) = (2 * b, 2 * b + 1);
        let (r0, r1) = rows.split_at_mut(n.min(rows.len()));
        if i1 >= n {
            for j in (i0 + 1)..n {
                r0[j] = u(dot(row(i0), row(j)), i0, j);
            }
            return;
        }
        r0[i1] = u(dot(row(i0), row(i1)), i0, i1);
        let (n0, n1) = (norms[i0], norms[i1]);
        let mut j = i1 + 1;
        while j + 4 <= n {
            let dots = dot2x4(simd, [row(i0), row(i1)], [row(j), row(j + 1), row(j + 2), row(j + 3)]);
            let nj = &norms[j..j + 4];
            let (o0, o1) = (&mut r0[j..j + 4], &mut r1[j..j + 4]);
            for c in 0..4 {
                o0[c] = uniqueness_from_dot(dots[0][c], n0, nj[c]);
                o1[c] = uniqueness_from_dot(dots[1][c], n1, nj[c]);
            }
            j += 4;
        }
        for j in j..n {
            r0[j] = u(dot(row(i0), row(j)), i0, j);
            r1[j] = u(dot(row(i1), row(j)), i1, j);
        }
    };
    let mut data = vec![0.0; n * n];
    if n >= PARALLEL_ROWS {
        data.par_chunks_mut(2 * n).enumerate().for_each(pair_block);
    } else {
        data.chunks_mut(2 * n).enumerate().for_each(pair_block);
    }

    const TILE: usize = 32;
    for ib in (0..n).step_by(TILE) {
        for jb in (ib..n).step_by(TILE) {
            for i in ib..(ib + TILE).min(n) {
                for j in jb.max(i + 1)..(jb + TILE).min(n) {
                    data[j * n + i] = data[i * n + j];
                }
            }
        }
    }
    UniquenessMatrix { n, data }
}

/// Pairwise uniqueness of every token pair in a frame.
pub fn uniqueness_matrix(tokens: &TokenMatrix) -> Result<UniquenessMatrix> {
    let norms = row_norms(tokens)?;
    Ok(uniqueness_matrix_with_norms(tokens, &norms))
}

/// Mean uniqueness of each token against all tokens of the frame.
pub fn token_uniqueness(tokens: &TokenMatrix) -> Result<UniquenessVector> {
    Ok(uniqueness_matrix(tokens)?.token_uniqueness())
}

/// Distinct token ids drawn from `[0, n)`, kept in the order given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionSet(Vec<usize>);

impl SelectionSet {
    pub fn new(ids: Vec<usize>, n: usize) -> Result<Self> {
        let mut seen = vec![false; n];
        for &i in &ids {
            if i >= n {
                return Err(Error::InvalidSelection(format!(
                    "id {i} out of range for {n} tokens"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidSelection(format!("duplicate id {i}")));
            }
        }
        Ok(Self(ids))
    }

    pub fn all(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.0.contains(&id)
    }

    fn sorted(&self) -> Vec<usize> {
        let mut ids = self.0.clone();
        ids.sort_unstable();
        ids
    }
}

/// Dense `f64` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Unit-norm copy of a token matrix together with the range of the input
/// row norms, so callers can tell how far the raw features were rescaled.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTokens {
    pub matrix: DenseMatrix,
    pub input_norm_min: f64,
    pub input_norm_max: f64,
}

impl NormalizedTokens {
    pub fn new(tokens: &TokenMatrix) -> Result<Self> {
        let norms = row_norms(tokens)?;
        let d = tokens.d();
        let mut data = Vec::with_capacity(tokens.n() * d);
        for (r, nr) in tokens.rows().zip(&norms) {
            data.extend(r.iter().map(|&v| f64::from(v) / nr));
        }
        Ok(Self {
            matrix: DenseMatrix {
                rows: tokens.n(),
                cols: d,
                data,
            },
            input_norm_min: norms.iter().copied().fold(f64::INFINITY, f64::min),
            input_norm_max: norms.iter().copied().fold(0.0, f64::max),
        })
    }

    /// True when every input row already had unit norm (within 1e-6).
    pub fn was_unit(&self) -> bool {
        (self.input_norm_min - 1.0).abs() <= 1e-6 && (self.input_norm_max - 1.0).abs() <= 1e-6
    }

    #[inline]
    fn similarity(&self, i: usize, j: usize) -> f64 {
        dot(self.matrix.row(i), self.matrix.row(j))
    }

    fn n(&self) -> usize {
        self.matrix.rows
    }

    /// Softmax weights over `selected` (ascending ids) for reconstructing `j`,
    /// paired with the similarities they were computed from.
    fn softmax_weights(&self, selected: &[usize], j: usize) -> (Vec<f64>, Vec<f64>) {
        let sims: Vec<f64> = selected.iter().map(|&i| self.similarity(i, j)).collect();
        let m = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = sims.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        (exps.into_iter().map(|e| e / z).collect(), sims)
    }

    /// Most similar selected token for `j`, ties to the lowest id.
    fn nearest(&self, selected: &[usize], j: usize) -> (usize, f64) {
        let mut best = (selected[0], self.similarity(selected[0], j));
        for &i in &selected[1..] {
            let s = self.similarity(i, j);
            if s > best.1 {
                best = (i, s);
            }
        }
        best
    }
}

/// How a token is rebuilt from the selected subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconstructionScheme {
    /// Convex combination with weights `softmax_i(s_ij)`.
    Softmax,
    /// Copy of the most similar selected token.
    Nearest,
}

fn checked_selection(n: usize, selected: &SelectionSet) -> Result<Vec<usize>> {
    if selected.is_empty() {
        return Err(Error::EmptySelection);
    }
    if let Some(&bad) = selected.ids().iter().find(|&&i| i >= n) {
        return Err(Error::InvalidSelection(format!(
            "id {bad} out of range for {n} tokens"
        )));
    }
    Ok(selected.sorted())
}

fn reconstruct_normalized(
    x: &NormalizedTokens,
    sel: &[usize],
    scheme: ReconstructionScheme,
) -> DenseMatrix {
    let (n, d) = (x.n(), x.matrix.cols);
    let mut data = vec![0.0; n * d];
    for (j, out) in data.chunks_exact_mut(d).enumerate() {
        match scheme {
            ReconstructionScheme::Nearest => {
                let (i, _) = x.nearest(sel, j);
                out.copy_from_slice(x.matrix.row(i));
            }
            ReconstructionScheme::Softmax => {
                let (w, _) = x.softmax_weights(sel, j);
                for (&i, wi) in sel.iter().zip(w) {
                    for (o, v) in out.iter_mut().zip(x.matrix.row(i)) {
                        *o += wi * v;
                    }
                }
            }
        }
    }
    DenseMatrix { rows: n, cols: d, data }
}

/// Reconstruction of every (row-normalized) token from `selected`.
pub fn reconstruction(
    tokens: &TokenMatrix,
    selected: &SelectionSet,
    scheme: ReconstructionScheme,
) -> Result<DenseMatrix> {
    let sel = checked_selection(tokens.n(), selected)?;
    let x = NormalizedTokens::new(tokens)?;
    Ok(reconstruct_normalized(&x, &sel, scheme))
}

/// Softmax reconstruction weights `w_ij`, one row per token `j`, columns
/// following `selected` in ascending id order.
pub fn softmax_weights(tokens: &TokenMatrix, selected: &SelectionSet) -> Result<DenseMatrix> {
    let sel = checked_selection(tokens.n(), selected)?;
    let x = NormalizedTokens::new(tokens)?;
    let mut data = Vec::with_capacity(x.n() * sel.len());
    for j in 0..x.n() {
        data.extend(x.softmax_weights(&sel, j).0);
    }
    Ok(DenseMatrix {
        rows: x.n(),
        cols: sel.len(),
        data,
    })
}

fn squared_residual_sum(x: &NormalizedTokens, rec: &DenseMatrix) -> f64 {
    (0..x.n())
        .map(|j| {
            x.matrix
                .row(j)
                .iter()
                .zip(rec.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum()
}

/// `sum_j ||x_j - x̂_j||^2` over all tokens, retained ones included.
pub fn reconstruction_error(
    tokens: &TokenMatrix,
    selected: &SelectionSet,
    scheme: ReconstructionScheme,
) -> Result<f64> {
    let sel = checked_selection(tokens.n(), selected)?;
    let x = NormalizedTokens::new(tokens)?;
    Ok(squared_residual_sum(&x, &reconstruct_normalized(&x, &sel, scheme)))
}

fn uniqueness_bound_normalized(x: &NormalizedTokens, sel: &[usize]) -> f64 {
    2.0 * (0..x.n())
        .map(|j| 1.0 - x.nearest(sel, j).1)
        .sum::<f64>()
}

fn step2_bound_normalized(x: &NormalizedTokens, sel: &[usize]) -> f64 {
    (0..x.n())
        .map(|j| {
            let (w, s) = x.softmax_weights(sel, j);
            let ws: f64 = w.iter().zip(&s).map(|(a, b)| a * b).sum();
            2.0 * (1.0 - ws)
        })
        .sum()
}

/// `2 * sum_j min_{i in S} u_ij` on row-normalized tokens.
pub fn uniqueness_bound(tokens: &TokenMatrix, selected: &SelectionSet) -> Result<f64> {
    let sel = checked_selection(tokens.n(), selected)?;
    let x = NormalizedTokens::new(tokens)?;
    Ok(uniqueness_bound_normalized(&x, &sel))
}

/// `sum_j 2 (1 - sum_i w_ij s_ij)` with softmax weights.
pub fn step2_bound(tokens: &TokenMatrix, selected: &SelectionSet) -> Result<f64> {
    let sel = checked_selection(tokens.n(), selected)?;
    let x = NormalizedTokens::new(tokens)?;
    Ok(step2_bound_normalized(&x, &sel))
}

/// All error/bound quantities for one selection, computed from a single
/// normalization pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundEvaluation {
    pub error_nearest: f64,
    pub error_softmax: f64,
    pub uniqueness_bound: f64,
    pub step2_bound: f64,
    /// Smallest input row norm before normalization.
    pub input_norm_min: f64,
    /// Largest input row norm before normalization.
    pub input_norm_max: f64,
}

pub fn evaluate_bounds(tokens: &TokenMatrix, selected: &SelectionSet) -> Result<BoundEvaluation> {
    let sel = checked_selection(tokens.n(), selected)?;
    let x = NormalizedTokens::new(tokens)?;
    Ok(evaluate_normalized(&x, &sel))
}

pub(crate) fn evaluate_normalized(x: &NormalizedTokens, sel: &[usize]) -> BoundEvaluation {
    let near = reconstruct_normalized(x, sel, ReconstructionScheme::Nearest);
    let soft = reconstruct_normalized(x, sel, ReconstructionScheme::Softmax);
    BoundEvaluation {
        error_nearest: squared_residual_sum(x, &near),
        error_softmax: squared_residual_sum(x, &soft),
        uniqueness_bound: uniqueness_bound_normalized(x, sel),
        step2_bound: step2_bound_normalized(x, sel),
        input_norm_min: x.input_norm_min,
        input_norm_max: x.input_norm_max,
    }
}
