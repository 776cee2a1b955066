//! Spatial dynamic compression.
//!
//! Tokens are visited in descending uniqueness order (ties to the lower
//! id). An unclaimed token is retained, every other unclaimed token within
//! `u_c` uniqueness of it becomes its neighbourhood and is claimed as
//! redundant, and the retained feature is replaced by
//! `(x_i + mean(neighbours)) / 2`. The loop stops once `budget` tokens are
//! retained or every token has been claimed.
//!
//! Neighbourhoods never include the retained token itself or tokens already
//! claimed, and fusion always reads the original (pre-fusion) features.
//! Those two rules make the result independent of evaluation order, which
//! is what lets [`sdc_parallel`] reproduce [`sdc_reference`] exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{
    norm, pairwise_uniqueness, row_mean, row_norms, uniqueness_matrix_with_norms,
    UniquenessVector,
};
use crate::tensor::TokenMatrix;

/// Order in which retained tokens are emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmitOrder {
    /// Original token order.
    #[default]
    Ids,
    /// Greedy selection order (most unique first).
    Uniqueness,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdcParams {
    /// Maximum number of retained tokens, `1..=N`.
    pub budget: usize,
    /// Redundancy threshold: `u_ij < u_c` marks `j` as a neighbour of `i`.
    pub u_c: f64,
    pub order: EmitOrder,
    /// Replace retained features by their neighbourhood fusion.
    pub fuse: bool,
}

impl SdcParams {
    pub fn new(budget: usize, u_c: f64) -> Self {
        Self {
            budget,
            u_c,
            order: EmitOrder::Ids,
            fuse: true,
        }
    }
}

/// Output of one frame's compression.
///
/// `retained_ids`, the ids in `redundancy`, and `dropped_unclaimed`
/// partition `0..N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedFrame {
    /// Retained ids in emission order.
    pub retained_ids: Vec<usize>,
    /// One row per retained id, same order.
    pub retained_features: TokenMatrix,
    /// Ids fused into each retained token, aligned with `retained_ids`,
    /// ascending within each list.
    pub redundancy: Vec<Vec<usize>>,
    /// Ids neither retained nor fused (the budget ran out first).
    pub dropped_unclaimed: Vec<usize>,
    /// Retained ids in the order the greedy loop picked them.
    pub selection_order: Vec<usize>,
}

impl CompressedFrame {
    pub fn retained(&self) -> usize {
        self.retained_ids.len()
    }

    pub fn fused(&self) -> usize {
        self.redundancy.iter().map(Vec::len).sum()
    }

    /// True when the greedy loop claimed every token before filling its budget.
    pub fn exhausted(&self) -> bool {
        self.dropped_unclaimed.is_empty()
    }

    /// Checks the partition invariant over `0..n`.
    pub fn check_partition(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        let ids = self
            .retained_ids
            .iter()
            .chain(self.redundancy.iter().flatten())
            .chain(&self.dropped_unclaimed);
        for &i in ids {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidSelection(format!(
                    "token {i} missing from or repeated in the partition"
                )));
            }
        }
        if seen.iter().all(|&s| s) {
            Ok(())
        } else {
            Err(Error::InvalidSelection("partition does not cover all tokens".into()))
        }
    }

    /// Describes the first difference from `other`: ids and neighbourhoods
    /// must match exactly, features within `tol`.
    pub fn mismatch(&self, other: &Self, tol: f64) -> Option<String> {
        if self.retained_ids != other.retained_ids {
            return Some(format!(
                "retained ids differ: {:?} vs {:?}",
                self.retained_ids, other.retained_ids
            ));
        }
        if self.selection_order != other.selection_order {
            return Some("selection order differs".into());
        }
        if self.redundancy != other.redundancy {
            return Some("redundancy maps differ".into());
        }
        if self.dropped_unclaimed != other.dropped_unclaimed {
            return Some("unclaimed ids differ".into());
        }
        let a = self.retained_features.as_slice();
        let b = other.retained_features.as_slice();
        if a.len() != b.len() {
            return Some("feature shapes differ".into());
        }
        a.iter()
            .zip(b)
            .position(|(x, y)| (f64::from(*x) - f64::from(*y)).abs() > tol)
            .map(|k| format!("feature {k} differs: {} vs {}", a[k], b[k]))
    }
}

fn validate<'a>(
    frame: &'a TokenMatrix,
    key_frame: Option<&'a TokenMatrix>,
    params: &SdcParams,
) -> Result<&'a TokenMatrix> {
    let n = frame.n();
    if params.budget == 0 || params.budget > n {
        return Err(Error::BudgetOutOfRange {
            k: params.budget,
            n,
        });
    }
    if !(0.0..=2.0).contains(&params.u_c) {
        return Err(Error::ThresholdOutOfRange {
            name: "U_c",
            value: params.u_c,
            min: 0.0,
            max: 2.0,
        });
    }
    match key_frame {
        Some(k) if k.n() != n => Err(Error::Shape(format!(
            "key frame has {} tokens, frame has {n}",
            k.n()
        ))),
        Some(k) => Ok(k),
        None => Ok(frame),
    }
}

/// `(x_i + mean_{j in nbrs} x_j) / 2`, or `x_i` when there are no neighbours.
fn fused_row(frame: &TokenMatrix, i: usize, nbrs: &[usize], out: &mut Vec<f32>) {
    let xi = frame.row(i);
    if nbrs.is_empty() {
        out.extend_from_slice(xi);
        return;
    }
    let mut acc = vec![0.0f64; frame.d()];
    for &j in nbrs {
        for (a, &v) in acc.iter_mut().zip(frame.row(j)) {
            *a += f64::from(v);
        }
    }
    let inv = 1.0 / nbrs.len() as f64;
    out.extend(
        xi.iter()
            .zip(&acc)
            .map(|(&x, &s)| (0.5 * (f64::from(x) + s * inv)) as f32),
    );
}

fn assemble(
    frame: &TokenMatrix,
    selection: Vec<usize>,
    neighbourhoods: Vec<Vec<usize>>,
    claimed: impl Fn(usize) -> bool,
    params: &SdcParams,
) -> CompressedFrame {
    let n = frame.n();
    let mut emit: Vec<usize> = (0..selection.len()).collect();
    if params.order == EmitOrder::Ids {
        emit.sort_by_key(|&k| selection[k]);
    }
    let rows: Vec<Vec<f32>> = emit
        .par_iter()
        .map(|&k| {
            let mut row = Vec::with_capacity(frame.d());
            if params.fuse {
                fused_row(frame, selection[k], &neighbourhoods[k], &mut row);
            } else {
                row.extend_from_slice(frame.row(selection[k]));
            }
            row
        })
        .collect();
    let data = rows.concat();
    CompressedFrame {
        retained_ids: emit.iter().map(|&k| selection[k]).collect(),
        retained_features: TokenMatrix::new(emit.len(), frame.d(), data)
            .expect("fused rows are finite"),
        redundancy: emit.iter().map(|&k| neighbourhoods[k].clone()).collect(),
        dropped_unclaimed: (0..n).filter(|&j| !claimed(j)).collect(),
        selection_order: selection,
    }
}

/// Direct transcription of the greedy loop: every pairwise uniqueness is
/// evaluated on its own and set membership is checked by linear scans.
pub fn sdc_reference(
    frame: &TokenMatrix,
    key_frame: Option<&TokenMatrix>,
    params: &SdcParams,
) -> Result<CompressedFrame> {
    let scores = validate(frame, key_frame, params)?;
    let n = scores.n();
    for (row, r) in scores.rows().enumerate() {
        if norm(r) == 0.0 {
            return Err(Error::DegenerateRow { row });
        }
    }

    let mut graph = vec![vec![0.0f64; n]; n];
    for (i, row) in graph.iter_mut().enumerate() {
        for (j, u) in row.iter_mut().enumerate() {
            if i != j {
                *u = pairwise_uniqueness(scores.row(i), scores.row(j))?;
            }
        }
    }
    let uniqueness = UniquenessVector(graph.iter().map(|r| row_mean(r)).collect());
    let sort_idx = uniqueness.descending_order();

    let mut selected: Vec<usize> = Vec::new();
    let mut redundant: Vec<usize> = Vec::new();
    let mut neighbourhoods: Vec<Vec<usize>> = Vec::new();
    for &i in &sort_idx {
        if selected.contains(&i) || redundant.contains(&i) {
            continue;
        }
        selected.push(i);
        let nbrs: Vec<usize> = (0..n)
            .filter(|&j| graph[i][j] < params.u_c)
            .filter(|j| !selected.contains(j) && !redundant.contains(j))
            .collect();
        redundant.extend_from_slice(&nbrs);
        neighbourhoods.push(nbrs);
        if selected.len() >= params.budget {
            break;
        }
    }

    let claimed = |j: usize| selected.contains(&j) || redundant.contains(&j);
    Ok(assemble(frame, selected.clone(), neighbourhoods, claimed, params))
}

/// Bit-packed set over token ids.
#[derive(Clone)]
struct BitSet {
    words: Vec<u64>,
}

impl BitSet {
    fn new(n: usize) -> Self {
        Self {
            words: vec![0; n.div_ceil(64)],
        }
    }

    #[inline]
    fn contains(&self, i: usize) -> bool {
        self.words[i >> 6] >> (i & 63) & 1 == 1
    }

    #[inline]
    fn insert(&mut self, i: usize) {
        self.words[i >> 6] |= 1 << (i & 63);
    }
}

/// Matrix form of the same greedy loop.
///
/// The uniqueness graph is built once from cached row norms over the upper
/// triangle, thresholded into bit-packed neighbour rows, and the greedy
/// loop reduces to word-wise `and-not` / `or` on those rows. Fusion runs as
/// one batched pass at the end.
pub fn sdc_parallel(
    frame: &TokenMatrix,
    key_frame: Option<&TokenMatrix>,
    params: &SdcParams,
) -> Result<CompressedFrame> {
    let scores = validate(frame, key_frame, params)?;
    let n = scores.n();
    let norms = row_norms(scores)?;
    let graph = uniqueness_matrix_with_norms(scores, &norms);
    let order = graph.token_uniqueness().descending_order();

    let u_c = params.u_c;
    let below: Vec<BitSet> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = BitSet::new(n);
            for (j, &u) in graph.row(i).iter().enumerate() {
                if u < u_c {
                    row.insert(j);
                }
            }
            row
        })
        .collect();

    let mut claimed = BitSet::new(n);
    let mut selection = Vec::with_capacity(params.budget);
    let mut neighbourhoods = Vec::with_capacity(params.budget);
    for &i in &order {
        if claimed.contains(i) {
            continue;
        }
        claimed.insert(i);
        selection.push(i);
        let mut nbrs = Vec::new();
        for (w, (c, b)) in claimed.words.iter_mut().zip(&below[i].words).enumerate() {
            let mut fresh = b & !*c;
            *c |= fresh;
            while fresh != 0 {
                nbrs.push(w * 64 + fresh.trailing_zeros() as usize);
                fresh &= fresh - 1;
            }
        }
        neighbourhoods.push(nbrs);
        if selection.len() >= params.budget {
            break;
        }
    }

    Ok(assemble(
        frame,
        selection,
        neighbourhoods,
        |j| claimed.contains(j),
        params,
    ))
}

/// Keeps the `budget` ids ranked first by `ranking`, emitted in original
/// order, with no fusion.
pub(crate) fn keep_ranked(frame: &TokenMatrix, ranking: &[usize], budget: usize) -> Result<CompressedFrame> {
    let n = frame.n();
    if budget == 0 || budget > n {
        return Err(Error::BudgetOutOfRange { k: budget, n });
    }
    let selection = ranking[..budget].to_vec();
    let mut ids = selection.clone();
    ids.sort_unstable();
    let mut keep = vec![false; n];
    ids.iter().for_each(|&i| keep[i] = true);
    Ok(CompressedFrame {
        retained_features: frame.select_rows(&ids)?,
        redundancy: vec![Vec::new(); ids.len()],
        dropped_unclaimed: (0..n).filter(|&j| !keep[j]).collect(),
        retained_ids: ids,
        selection_order: selection,
    })
}

/// Keeps the `budget` highest-scoring tokens (ties to the lower id), e.g.
/// by attention received.
pub fn attn_topk(frame: &TokenMatrix, attn_scores: &[f64], budget: usize) -> Result<CompressedFrame> {
    if attn_scores.len() != frame.n() {
        return Err(Error::Shape(format!(
            "{} scores for {} tokens",
            attn_scores.len(),
            frame.n()
        )));
    }
    let ranking = UniquenessVector(attn_scores.to_vec()).descending_order();
    keep_ranked(frame, &ranking, budget)
}
