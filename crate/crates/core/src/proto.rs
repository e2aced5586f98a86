//! Non-parametric prototype predictor: a base of masked samples, relaxed
//! (differentiable) sorting for training, hard top-K sorting for inference,
//! and the nearest-prototype prediction loss.

use crate::diffcore::{softmax_in_place, NodeId, Tape};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use thiserror::Error;

/// Default distance guard.
pub const DEFAULT_DELTA: f64 = 1e-9;

/// Default training temperature.
pub const DEFAULT_TAU: f64 = 16.0;

#[derive(Debug, Error, PartialEq)]
pub enum ProtoError {
    #[error("prototype base must not be empty")]
    EmptyBase,
    #[error("{rows} prototype rows but {labels} labels and {sources} source indices")]
    LengthMismatch {
        rows: usize,
        labels: usize,
        sources: usize,
    },
    #[error("query has {got} features, base has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least {needed} prototypes for K={k}, base has {available}")]
    BaseTooSmall {
        k: usize,
        needed: usize,
        available: usize,
    },
    #[error("K must be at least 1")]
    ZeroK,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
}

pub type Result<T> = std::result::Result<T, ProtoError>;

/// Masked samples retained for nearest-prototype prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBase {
    pub samples: Matrix,
    pub labels: Vec<usize>,
    pub sources: Vec<usize>,
}

impl PrototypeBase {
    pub fn new(samples: Matrix, labels: Vec<usize>, sources: Vec<usize>) -> Result<Self> {
        build_base(samples, labels, sources)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.samples.cols()
    }
}

pub fn build_base(
    samples: Matrix,
    labels: Vec<usize>,
    sources: Vec<usize>,
) -> Result<PrototypeBase> {
    if samples.rows() == 0 {
        return Err(ProtoError::EmptyBase);
    }
    if labels.len() != samples.rows() || sources.len() != samples.rows() {
        return Err(ProtoError::LengthMismatch {
            rows: samples.rows(),
            labels: labels.len(),
            sources: sources.len(),
        });
    }
    Ok(PrototypeBase {
        samples,
        labels,
        sources,
    })
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_query(query: &[f64], base: &PrototypeBase) -> Result<()> {
    if query.len() != base.features() {
        return Err(ProtoError::DimensionMismatch {
            expected: base.features(),
            got: query.len(),
        });
    }
    Ok(())
}

/// Euclidean distances from the query to every prototype.
pub fn distances(query: &[f64], base: &PrototypeBase) -> Result<Vec<f64>> {
    check_query(query, base)?;
    Ok((0..base.len())
        .map(|n| euclidean(query, base.samples.row(n)))
        .collect())
}

/// `v[n] = 1 / (||q - x_n|| + delta)`.
pub fn similarity(query: &[f64], base: &PrototypeBase, delta: f64) -> Result<Vec<f64>> {
    Ok(distances(query, base)?
        .into_iter()
        .map(|d| 1.0 / (d + delta))
        .collect())
}

/// `A·1` where `A[n, m] = |v[n] - v[m]|`.
pub fn abs_diff_sums(v: &[f64]) -> Vec<f64> {
    crate::fused::abs_diff_sums_sorted(v)
}

/// Unscaled scores `(N + 1 - 2n) v - A·1` for the first `rows` ranks
/// (`n = 1..=rows`).
pub fn relaxed_scores(v: &[f64], rows: usize) -> Matrix {
    let n = v.len();
    let a1 = abs_diff_sums(v);
    let mut out = Matrix::zeros(rows, n);
    for r in 0..rows {
        let coef = (n as f64) + 1.0 - 2.0 * (r as f64 + 1.0);
        for (o, (&vm, &am)) in out.row_mut(r).iter_mut().zip(v.iter().zip(&a1)) {
            *o = coef * vm - am;
        }
    }
    out
}

/// Row-stochastic relaxation of the descending sorting permutation of `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedPermutation {
    pub matrix: Matrix,
    pub tau: f64,
}

impl RelaxedPermutation {
    /// Column of the largest entry in each row.
    pub fn row_argmax(&self) -> Vec<usize> {
        (0..self.matrix.rows())
            .map(|r| argmax(self.matrix.row(r)))
            .collect()
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// First `rows` rows of the relaxed permutation matrix.
pub fn relaxed_rows(v: &[f64], tau: f64, rows: usize) -> Result<Matrix> {
    if !(tau > 0.0) {
        return Err(ProtoError::BadTemperature(tau));
    }
    let mut s = relaxed_scores(v, rows.min(v.len()));
    let inv = 1.0 / tau;
    for x in s.as_mut_slice() {
        *x *= inv;
    }
    for r in 0..s.rows() {
        softmax_in_place(s.row_mut(r));
    }
    Ok(s)
}

/// Full `N × N` relaxed permutation matrix.
pub fn relaxed_sort(v: &[f64], tau: f64) -> Result<RelaxedPermutation> {
    Ok(RelaxedPermutation {
        matrix: relaxed_rows(v, tau, v.len())?,
        tau,
    })
}

/// Indices of the `k` largest entries, descending, ties to the lower index.
pub fn hard_topk(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(ProtoError::ZeroK);
    }
    if k > v.len() {
        return Err(ProtoError::BaseTooSmall {
            k,
            needed: k,
            available: v.len(),
        });
    }
    let cmp = |a: &usize, b: &usize| {
        v[*b]
            .partial_cmp(&v[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..v.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    Ok(idx)
}

/// Majority label of an ordered neighbour list; ties go to the class of the
/// nearest neighbour among the tied classes.
pub fn majority_label(ordered_labels: &[usize]) -> usize {
    let max_label = ordered_labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max_label + 1];
    for &l in ordered_labels {
        counts[l] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    ordered_labels
        .iter()
        .copied()
        .find(|&l| counts[l] == best)
        .unwrap_or(0)
}

/// How the prototypes are ranked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SortMode {
    /// Hard top-K (inference).
    Hard,
    /// Per-row argmax of the relaxed permutation (training-time view).
    Relaxed { tau: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    /// Row in the base.
    pub position: usize,
    pub source_index: usize,
    pub label: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: usize,
    /// Nearest prototypes, nearest first.
    pub neighbors: Vec<Neighbor>,
}

/// Explanation record for one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub query_id: usize,
    pub predicted_label: usize,
    pub neighbors: Vec<NeighborRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborRecord {
    pub source_index: usize,
    pub label: usize,
    pub distance: f64,
}

impl Prediction {
    pub fn explanation(&self, query_id: usize) -> Explanation {
        let mut neighbors: Vec<NeighborRecord> = self
            .neighbors
            .iter()
            .map(|n| NeighborRecord {
                source_index: n.source_index,
                label: n.label,
                distance: n.distance,
            })
            .collect();
        neighbors.sort_by(|a, b| {
            a.distance
                .partial_cmp(&b.distance)
                .unwrap_or(Ordering::Equal)
        });
        Explanation {
            query_id,
            predicted_label: self.label,
            neighbors,
        }
    }
}

/// Rows of the base that remain after removing the prototype whose source
/// index equals `exclude`.
fn candidate_rows(base: &PrototypeBase, exclude: Option<usize>) -> Vec<usize> {
    (0..base.len())
        .filter(|&n| Some(base.sources[n]) != exclude)
        .collect()
}

fn check_k(k: usize, available: usize, excluding: bool) -> Result<()> {
    if k == 0 {
        return Err(ProtoError::ZeroK);
    }
    if k > available {
        return Err(ProtoError::BaseTooSmall {
            k,
            needed: k + usize::from(excluding),
            available: available + usize::from(excluding),
        });
    }
    Ok(())
}

/// Majority vote over the `k` nearest prototypes.
pub fn predict(
    query: &[f64],
    base: &PrototypeBase,
    k: usize,
    mode: SortMode,
    delta: f64,
    exclude: Option<usize>,
) -> Result<Prediction> {
    check_query(query, base)?;
    let rows = candidate_rows(base, exclude);
    check_k(k, rows.len(), exclude.is_some())?;
    let dist: Vec<f64> = rows
        .iter()
        .map(|&n| euclidean(query, base.samples.row(n)))
        .collect();
    let v: Vec<f64> = dist.iter().map(|d| 1.0 / (d + delta)).collect();
    let order = match mode {
        SortMode::Hard => hard_topk(&v, k)?,
        SortMode::Relaxed { tau } => {
            if !(tau > 0.0) {
                return Err(ProtoError::BadTemperature(tau));
            }
            // softmax is monotone, so the row argmax is the argmax of the scores
            let s = relaxed_scores(&v, k);
            (0..k).map(|r| argmax(s.row(r))).collect()
        }
    };
    let neighbors: Vec<Neighbor> = order
        .iter()
        .map(|&i| {
            let n = rows[i];
            Neighbor {
                position: n,
                source_index: base.sources[n],
                label: base.labels[n],
                distance: dist[i],
            }
        })
        .collect();
    let labels: Vec<usize> = neighbors.iter().map(|n| n.label).collect();
    Ok(Prediction {
        label: majority_label(&labels),
        neighbors,
    })
}

/// `K - sum_{n<=K} sum_m P[n, m] 1(y_m = y_query)`.
pub fn prediction_loss(
    query: &[f64],
    query_label: usize,
    base: &PrototypeBase,
    k: usize,
    tau: f64,
    delta: f64,
    exclude: Option<usize>,
) -> Result<f64> {
    check_query(query, base)?;
    let rows = candidate_rows(base, exclude);
    check_k(k, rows.len(), exclude.is_some())?;
    let v: Vec<f64> = rows
        .iter()
        .map(|&n| 1.0 / (euclidean(query, base.samples.row(n)) + delta))
        .collect();
    let p = relaxed_rows(&v, tau, k)?;
    let mut matched = 0.0;
    for r in 0..k {
        for (col, &pm) in p.row(r).iter().enumerate() {
            if base.labels[rows[col]] == query_label {
                matched += pm;
            }
        }
    }
    Ok(k as f64 - matched)
}

/// Records the mean in-batch prediction loss on a tape. Every row of
/// `masked` acts once as the query, with itself removed from the base.
pub fn record_batch_loss(
    tape: &mut Tape,
    masked: NodeId,
    labels: &[usize],
    k: usize,
    tau: f64,
    delta: f64,
) -> Result<NodeId> {
    let b = labels.len();
    check_k(k, b.saturating_sub(1), true)?;
    if !(tau > 0.0) {
        return Err(ProtoError::BadTemperature(tau));
    }
    let others = b - 1;
    let coef = tape.constant(Matrix::col_vector(
        (1..=k)
            .map(|n| others as f64 + 1.0 - 2.0 * n as f64)
            .collect(),
    ));
    let mut losses = Vec::with_capacity(b);
    for i in 0..b {
        let rest: Vec<usize> = (0..b).filter(|&j| j != i).collect();
        let indicator = tape.constant(Matrix::col_vector(
            rest.iter()
                .map(|&j| if labels[j] == labels[i] { 1.0 } else { 0.0 })
                .collect(),
        ));
        let q = tape.gather(masked, vec![i]);
        let base = tape.gather(masked, rest);
        let nq = tape.negate(q);
        let diff = tape.add(base, nq);
        let sq = tape.square(diff);
        let d2 = tape.row_sum(sq);
        let d = tape.sqrt(d2);
        let d = tape.offset(d, delta);
        let v = tape.reciprocal(d);
        let vt = tape.transpose(v);
        let a1 = tape.abs_diff_sum(vt);
        let cv = tape.matmul(coef, vt);
        let na1 = tape.negate(a1);
        let scores = tape.add(cv, na1);
        let scores = tape.scale(scores, 1.0 / tau);
        let p = tape.row_softmax(scores);
        let hits = tape.matmul(p, indicator);
        let hits = tape.sum(hits);
        let neg = tape.negate(hits);
        losses.push(tape.offset(neg, k as f64));
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l);
    }
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Outcome of comparing hard and relaxed rankings on a set of queries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParityReport {
    pub queries: usize,
    pub agreements: usize,
    /// Queries whose similarity vector has tied entries; not counted as failures.
    pub ties: Vec<usize>,
    pub mismatches: Vec<ParityMismatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParityMismatch {
    pub query: usize,
    pub similarity: Vec<f64>,
    pub hard_labels: Vec<usize>,
    pub relaxed_labels: Vec<usize>,
}

impl ParityReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

fn has_ties(v: &[f64]) -> bool {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    s.windows(2).any(|w| w[0] == w[1])
}

/// Checks that hard top-K and relaxed row-argmax select the same label
/// multiset for every query with distinct similarities.
pub fn hybrid_parity_check(
    base: &PrototypeBase,
    queries: &Matrix,
    k: usize,
    tau: f64,
    delta: f64,
) -> Result<ParityReport> {
    let mut report = ParityReport {
        queries: queries.rows(),
        ..Default::default()
    };
    for q in 0..queries.rows() {
        let query = queries.row(q);
        let hard = predict(query, base, k, SortMode::Hard, delta, None)?;
        let relaxed = predict(query, base, k, SortMode::Relaxed { tau }, delta, None)?;
        let mut hl: Vec<usize> = hard.neighbors.iter().map(|n| n.label).collect();
        let mut rl: Vec<usize> = relaxed.neighbors.iter().map(|n| n.label).collect();
        hl.sort_unstable();
        rl.sort_unstable();
        let v = similarity(query, base, delta)?;
        if hl == rl && hard.label == relaxed.label {
            report.agreements += 1;
        } else if has_ties(&v) {
            report.ties.push(q);
        } else {
            report.mismatches.push(ParityMismatch {
                query: q,
                similarity: v,
                hard_labels: hl,
                relaxed_labels: rl,
            });
        }
    }
    Ok(report)
}
