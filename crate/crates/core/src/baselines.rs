//! Reference methods for rank comparisons: plain KNN on all features, and
//! KNN on the top features by univariate correlation with the label.

use crate::data::Dataset;
use crate::metrics::balanced_accuracy;
use crate::proto::{build_base, predict, ProtoError, SortMode};
use crate::tensor::Matrix;
use serde::{Deserialize, Serialize};

pub const KNN_ALL: &str = "knn_all";
pub const CORR_TOPK: &str = "corr_topk_knn";

/// Candidate sizes tried by the correlation selector.
pub const CORR_TOPK_CANDIDATES: [usize; 4] = [5, 10, 20, 50];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: String,
    /// Features used (the same for every sample).
    pub selected: Vec<usize>,
    pub val_balanced_accuracy: f64,
    pub test_predictions: Vec<usize>,
}

fn columns(x: &Matrix, cols: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), cols.len());
    for r in 0..x.rows() {
        for (j, &c) in cols.iter().enumerate() {
            out.set(r, j, x.get(r, c));
        }
    }
    out
}

/// Hard KNN predictions for every row of `query` using only `cols`.
pub fn knn_predict(
    train: &Dataset,
    query: &Matrix,
    cols: &[usize],
    k: usize,
    delta: f64,
) -> Result<Vec<usize>, ProtoError> {
    let base = build_base(
        columns(&train.x, cols),
        train.y.clone(),
        (0..train.len()).collect(),
    )?;
    let q = columns(query, cols);
    (0..q.rows())
        .map(|i| predict(q.row(i), &base, k, SortMode::Hard, delta, None).map(|p| p.label))
        .collect()
}

pub fn knn_all_features(
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    k: usize,
    delta: f64,
) -> Result<BaselineResult, ProtoError> {
    let cols: Vec<usize> = (0..train.features()).collect();
    let val_pred = knn_predict(train, &val.x, &cols, k, delta)?;
    Ok(BaselineResult {
        method: KNN_ALL.into(),
        val_balanced_accuracy: bacc(&val.y, &val_pred, val.class_count),
        test_predictions: knn_predict(train, &test.x, &cols, k, delta)?,
        selected: cols,
    })
}

fn bacc(y: &[usize], p: &[usize], classes: usize) -> f64 {
    balanced_accuracy(y, p, classes).unwrap_or(f64::NAN)
}

/// Per feature, the largest absolute Pearson correlation with a one-vs-rest
/// class indicator. Constant features score 0.
pub fn correlation_scores(ds: &Dataset) -> Vec<f64> {
    let n = ds.len() as f64;
    let indicators: Vec<Vec<f64>> = (0..ds.class_count)
        .map(|c| {
            ds.y.iter()
                .map(|&y| if y == c { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    (0..ds.features())
        .map(|d| {
            let col = ds.x.column(d);
            let mx = col.iter().sum::<f64>() / n;
            let sx = col.iter().map(|v| (v - mx) * (v - mx)).sum::<f64>().sqrt();
            if sx < 1e-12 {
                return 0.0;
            }
            indicators
                .iter()
                .map(|ind| {
                    let my = ind.iter().sum::<f64>() / n;
                    let sy = ind.iter().map(|v| (v - my) * (v - my)).sum::<f64>().sqrt();
                    if sy < 1e-12 {
                        return 0.0;
                    }
                    let cov: f64 = col.iter().zip(ind).map(|(a, b)| (a - mx) * (b - my)).sum();
                    (cov / (sx * sy)).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Indices of the `k` highest scores; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k.min(scores.len()));
    order.sort_unstable();
    order
}

/// Picks the number of top-correlated features on the validation split and
/// reports test predictions for that choice.
pub fn corr_topk_knn(
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    k: usize,
    delta: f64,
) -> Result<BaselineResult, ProtoError> {
    let scores = correlation_scores(train);
    let mut best: Option<(f64, Vec<usize>)> = None;
    for &m in &CORR_TOPK_CANDIDATES {
        if m > train.features() {
            continue;
        }
        let cols = top_k(&scores, m);
        let val_pred = knn_predict(train, &val.x, &cols, k, delta)?;
        let acc = bacc(&val.y, &val_pred, val.class_count);
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, cols));
        }
    }
    let (acc, cols) = best.unwrap_or_else(|| (f64::NAN, (0..train.features()).collect()));
    Ok(BaselineResult {
        method: CORR_TOPK.into(),
        val_balanced_accuracy: acc,
        test_predictions: knn_predict(train, &test.x, &cols, k, delta)?,
        selected: cols,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(x: Vec<Vec<f64>>, y: Vec<usize>) -> Dataset {
        let d = x[0].len();
        Dataset {
            x: Matrix::from_rows(&x),
            y,
            class_count: 2,
            feature_names: (0..d).map(|i| format!("f{i}")).collect(),
            label_names: vec!["a".into(), "b".into()],
            ground_truth: None,
        }
    }

    #[test]
    fn correlation_prefers_informative_column() {
        let d = ds(
            vec![
                vec![0.0, 5.0, 1.0],
                vec![0.1, -3.0, 1.0],
                vec![1.0, 2.0, 1.0],
                vec![0.9, -1.0, 1.0],
            ],
            vec![0, 0, 1, 1],
        );
        let s = correlation_scores(&d);
        assert!(s[0] > 0.9 && s[0] > s[1]);
        assert_eq!(s[2], 0.0);
        assert_eq!(top_k(&s, 1), vec![0]);
        assert_eq!(top_k(&[1.0, 1.0, 0.5], 1), vec![0]);
    }

    #[test]
    fn knn_on_separable_data_is_perfect() {
        let train = ds(
            vec![
                vec![0.0, 0.0],
                vec![0.1, 0.0],
                vec![5.0, 5.0],
                vec![5.1, 5.0],
            ],
            vec![0, 0, 1, 1],
        );
        let test = ds(vec![vec![0.2, 0.1], vec![4.9, 5.2]], vec![0, 1]);
        let r = knn_all_features(&train, &test, &test, 1, 1e-9).unwrap();
        assert_eq!(r.test_predictions, vec![0, 1]);
        assert_eq!(r.val_balanced_accuracy, 1.0);
    }
}
