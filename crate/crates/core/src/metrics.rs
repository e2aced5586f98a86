//! Evaluation quantities: balanced accuracy, feature-selection F1 and rank
//! fidelity, sparsity statistics, mask composition, degree of local sparsity
//! and ADTM aggregation.

use crate::selector::{mask_tag, MaskTag};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("rankings cover different methods")]
    MethodSetMismatch,
}

/// Mean per-class recall over classes present in `y_true`.
pub fn balanced_accuracy(
    y_true: &[usize],
    y_pred: &[usize],
    class_count: usize,
) -> Result<f64, MetricsError> {
    if y_true.is_empty() {
        return Err(MetricsError::Empty);
    }
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    let classes = class_count.max(y_true.iter().copied().max().unwrap_or(0) + 1);
    let mut support = vec![0usize; classes];
    let mut hits = vec![0usize; classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        support[t] += 1;
        if t == p {
            hits[t] += 1;
        }
    }
    let (sum, present) = support
        .iter()
        .zip(&hits)
        .filter(|(&s, _)| s > 0)
        .fold((0.0, 0usize), |(acc, n), (&s, &h)| {
            (acc + h as f64 / s as f64, n + 1)
        });
    Ok(sum / present as f64)
}

/// Indices with a positive mask value.
pub fn selected_features(mask: &[f64]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(d, _)| d)
        .collect()
}

/// F1 of one selected set against one informative set.
pub fn f1_sets(selected: &[usize], truth: &[usize]) -> f64 {
    if selected.is_empty() && truth.is_empty() {
        return 1.0;
    }
    let t: BTreeSet<usize> = truth.iter().copied().collect();
    let tp = selected.iter().filter(|d| t.contains(d)).count();
    2.0 * tp as f64 / (selected.len() + t.len()) as f64
}

/// Mean over samples of the per-sample selection F1.
pub fn f1_select(masks: &Matrix, truth: &[Vec<usize>]) -> Result<f64, MetricsError> {
    if masks.rows() != truth.len() {
        return Err(MetricsError::LengthMismatch(masks.rows(), truth.len()));
    }
    if truth.is_empty() {
        return Err(MetricsError::Empty);
    }
    let total: f64 = (0..masks.rows())
        .map(|i| f1_sets(&selected_features(masks.row(i)), &truth[i]))
        .sum();
    Ok(total / truth.len() as f64)
}

/// Ranks with 1 = highest score; tied scores share the average of their
/// positions.
pub fn average_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Ranks a method → score map (higher is better).
pub fn rank_methods(scores: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let names: Vec<&String> = scores.keys().collect();
    let vals: Vec<f64> = scores.values().copied().collect();
    names
        .into_iter()
        .cloned()
        .zip(average_ranks(&vals))
        .collect()
}

/// `rank(F1_select) - rank(ACC_pred)` per method; positive values flag
/// selections that rank worse than the accuracy they accompany.
pub fn rank_difference(
    f1_ranks: &BTreeMap<String, f64>,
    acc_ranks: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, f64>, MetricsError> {
    if f1_ranks.keys().ne(acc_ranks.keys()) {
        return Err(MetricsError::MethodSetMismatch);
    }
    Ok(f1_ranks
        .iter()
        .map(|(m, r)| (m.clone(), r - acc_ranks[m]))
        .collect())
}

/// `Q = (1 / (D N)) sum_j |U \ S_j|` with `U` the union of selected sets.
pub fn degree_of_local_sparsity(masks: &Matrix) -> Result<f64, MetricsError> {
    let (n, d) = masks.shape();
    if n == 0 || d == 0 {
        return Err(MetricsError::Empty);
    }
    let union: BTreeSet<usize> = (0..n)
        .flat_map(|i| selected_features(masks.row(i)))
        .collect();
    let deficit: usize = (0..n)
        .map(|i| union.len() - selected_features(masks.row(i)).len())
        .sum();
    Ok(deficit as f64 / (d * n) as f64)
}

/// Share of selected (sample, feature) pairs by global status, plus counts of
/// the unselected categories.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Composition {
    pub both_selected: f64,
    pub locally_recovered: f64,
    pub locally_dropped_count: usize,
    pub both_dropped_count: usize,
    pub selected_pairs: usize,
}

pub fn composition(s_global: &[f64], masks: &Matrix) -> Result<Composition, MetricsError> {
    if s_global.len() != masks.cols() {
        return Err(MetricsError::LengthMismatch(s_global.len(), masks.cols()));
    }
    let mut counts: BTreeMap<MaskTag, usize> = BTreeMap::new();
    for i in 0..masks.rows() {
        for (d, &m) in masks.row(i).iter().enumerate() {
            *counts.entry(mask_tag(s_global[d], m)).or_default() += 1;
        }
    }
    let get = |t| counts.get(&t).copied().unwrap_or(0);
    let both = get(MaskTag::BothSelected);
    let rec = get(MaskTag::LocallyRecovered);
    let selected = both + rec;
    let frac = |x: usize| {
        if selected == 0 {
            0.0
        } else {
            x as f64 / selected as f64
        }
    };
    Ok(Composition {
        both_selected: frac(both),
        locally_recovered: frac(rec),
        locally_dropped_count: get(MaskTag::LocallyDropped),
        both_dropped_count: get(MaskTag::BothDropped),
        selected_pairs: selected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SelectionStats {
    pub mean_selected: f64,
    pub std_selected: f64,
    /// Mean fraction of the `D` features selected per sample.
    pub mean_proportion: f64,
}

pub fn selection_stats(masks: &Matrix) -> SelectionStats {
    let (n, d) = masks.shape();
    if n == 0 {
        return SelectionStats::default();
    }
    let counts: Vec<f64> = (0..n)
        .map(|i| selected_features(masks.row(i)).len() as f64)
        .collect();
    let (mean, std) = mean_std(&counts);
    SelectionStats {
        mean_selected: mean,
        std_selected: std,
        mean_proportion: if d == 0 { 0.0 } else { mean / d as f64 },
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Everything measured on one evaluation split.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub balanced_accuracy: f64,
    pub selection: SelectionStats,
    pub f1_select: Option<f64>,
    pub composition: Composition,
    pub local_sparsity_q: f64,
    pub global_selected: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherIsBetter,
    LowerIsBetter,
}

/// Per dataset, maps each method's score affinely so the best is 1 and the
/// worst 0 (a dataset where all scores tie gives 1 to everyone), then
/// averages per method across datasets.
///
/// `per_dataset[dataset][method] = score`. Methods missing on a dataset are
/// averaged over the datasets where they appear.
pub fn adtm_aggregate(
    per_dataset: &BTreeMap<String, BTreeMap<String, f64>>,
    orientation: Orientation,
) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for scores in per_dataset.values() {
        let vals = scores.values().copied();
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        let (best, worst) = match orientation {
            Orientation::HigherIsBetter => (hi, lo),
            Orientation::LowerIsBetter => (lo, hi),
        };
        for (m, &s) in scores {
            let norm = if best == worst {
                1.0
            } else {
                (s - worst) / (best - worst)
            };
            let e = sums.entry(m.clone()).or_insert((0.0, 0));
            e.0 += norm;
            e.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(m, (s, n))| (m, s / n as f64))
        .collect()
}
