//! Datasets: synthetic generators with ground-truth informative features,
//! CSV ingestion and export, z-score normalisation, and stratified repeated
//! k-fold split plans.

use crate::seed;
use crate::tensor::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("file has no data rows")]
    Empty,
    #[error("label column `{0}` not found in header")]
    MissingColumn(String),
    #[error("non-numeric or missing feature values on rows {rows:?} (1-based, header excluded)")]
    Unparseable { rows: Vec<usize> },
    #[error("row {row} has {got} fields, header has {expected}")]
    Ragged {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("dataset has a single class; classification needs at least two")]
    SingleClass,
    #[error("synthetic datasets need at least 11 features, got {0}")]
    TooFewFeatures(usize),
    #[error("class quotas not reached after {0} draws")]
    QuotaUnreachable(usize),
    #[error("class {class} has {count} samples, fewer than {folds} folds")]
    ClassTooSmall {
        class: usize,
        count: usize,
        folds: usize,
    },
    #[error("invalid split parameters: {0}")]
    BadSplit(String),
    #[error("unknown synthetic dataset `{0}` (expected syn1, syn2 or syn3)")]
    UnknownKind(String),
    #[error("invalid truth file: {0}")]
    BadTruth(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Synthetic benchmark families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynKind {
    Syn1,
    Syn2,
    Syn3,
}

impl SynKind {
    pub const ALL: [SynKind; 3] = [SynKind::Syn1, SynKind::Syn2, SynKind::Syn3];

    pub fn name(self) -> &'static str {
        match self {
            SynKind::Syn1 => "syn1",
            SynKind::Syn2 => "syn2",
            SynKind::Syn3 => "syn3",
        }
    }

    /// Logit and 0-based informative features of a sample.
    pub fn logit(self, x: &[f64]) -> (f64, &'static [usize]) {
        // 0-based: x1 -> x[0], ..., x11 -> x[10]
        let low = x[10] < 0.0;
        let sq = |i: usize| x[i] * x[i];
        let hi_branch_23 =
            || (-10.0 * (0.2 * x[6]).sin() + x[7].abs() + sq(8) + (-x[9]).exp() - 2.4).exp();
        match (self, low) {
            (SynKind::Syn1, true) => ((x[0] * x[1] - x[2]).exp(), &[0, 1, 2, 10]),
            (SynKind::Syn1, false) => (
                (sq(2) + sq(3) + sq(4) + sq(5) - 4.0).exp(),
                &[2, 3, 4, 5, 10],
            ),
            (SynKind::Syn2, true) => (
                (sq(2) + sq(3) + sq(4) + sq(5) + sq(6) - 4.0).exp(),
                &[2, 3, 4, 5, 6, 10],
            ),
            (SynKind::Syn3, true) => ((x[0] * x[1] + x[8].abs()).exp(), &[0, 1, 8, 10]),
            (SynKind::Syn2 | SynKind::Syn3, false) => (hi_branch_23(), &[6, 7, 8, 9, 10]),
        }
    }

    /// `1(1 / (1 + logit) > 0.5)`.
    pub fn label(self, x: &[f64]) -> usize {
        let (logit, _) = self.logit(x);
        usize::from(1.0 / (1.0 + logit) > 0.5)
    }
}

impl fmt::Display for SynKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynKind {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "syn1" => Ok(SynKind::Syn1),
            "syn2" => Ok(SynKind::Syn2),
            "syn3" => Ok(SynKind::Syn3),
            _ => Err(DataError::UnknownKind(s.to_string())),
        }
    }
}

/// Labelled tabular data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub class_count: usize,
    pub feature_names: Vec<String>,
    /// Original label values, indexed by class id.
    pub label_names: Vec<String>,
    /// Per-sample informative features (0-based), when known.
    pub ground_truth: Option<Vec<Vec<usize>>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        for &l in &self.y {
            c[l] += 1;
        }
        c
    }

    /// Rows `idx` as a new dataset (same class ids).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            class_count: self.class_count,
            feature_names: self.feature_names.clone(),
            label_names: self.label_names.clone(),
            ground_truth: self
                .ground_truth
                .as_ref()
                .map(|gt| idx.iter().map(|&i| gt[i].clone()).collect()),
        }
    }

    /// Same dataset with a replaced feature matrix.
    pub fn with_features(&self, x: Matrix) -> Dataset {
        assert_eq!(x.rows(), self.len());
        Dataset { x, ..self.clone() }
    }
}

fn default_feature_names(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("x{i}")).collect()
}

/// Provenance of a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInfo {
    pub kind: SynKind,
    pub seed: u64,
    /// Threshold label that received the first (larger) quota.
    pub class_one_label: usize,
    pub class_one_count: usize,
    pub class_two_count: usize,
    /// `true` when the sample came from the `x11 < 0` branch.
    pub low_branch: Vec<bool>,
    pub draws: usize,
}

pub const MAX_SYNTHETIC_DRAWS: usize = 1_000_000;

/// Draws i.i.d. Gaussian samples, labels them with the family's threshold
/// rule and keeps them until `n_class_one` samples with label 0 and
/// `n_class_two` with label 1 have been accepted.
pub fn gen_synthetic(
    kind: SynKind,
    n_class_one: usize,
    n_class_two: usize,
    features: usize,
    seed_value: u64,
) -> Result<(Dataset, SyntheticInfo)> {
    if features < 11 {
        return Err(DataError::TooFewFeatures(features));
    }
    let mut rng = seed::stream(seed_value, "synthetic", &[]);
    let quota = [n_class_one, n_class_two];
    let mut taken = [0usize; 2];
    let mut data = Vec::with_capacity((n_class_one + n_class_two) * features);
    let mut y = Vec::new();
    let mut truth = Vec::new();
    let mut low = Vec::new();
    let mut draws = 0;
    let mut row = vec![0.0; features];
    while taken != quota {
        if draws >= MAX_SYNTHETIC_DRAWS {
            return Err(DataError::QuotaUnreachable(draws));
        }
        draws += 1;
        for v in row.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let label = kind.label(&row);
        if taken[label] == quota[label] {
            continue;
        }
        taken[label] += 1;
        data.extend_from_slice(&row);
        y.push(label);
        truth.push(kind.logit(&row).1.to_vec());
        low.push(row[10] < 0.0);
    }
    let n = y.len();
    let ds = Dataset {
        x: Matrix::from_vec(n, features, data),
        y,
        class_count: 2,
        feature_names: default_feature_names(features),
        label_names: vec!["0".into(), "1".into()],
        ground_truth: Some(truth),
    };
    let info = SyntheticInfo {
        kind,
        seed: seed_value,
        class_one_label: 0,
        class_one_count: n_class_one,
        class_two_count: n_class_two,
        low_branch: low,
        draws,
    };
    Ok((ds, info))
}

/// The benchmark configuration: 150 + 50 samples, 100 features.
pub fn gen_synthetic_default(kind: SynKind, seed_value: u64) -> Result<(Dataset, SyntheticInfo)> {
    gen_synthetic(kind, 150, 50, 100, seed_value)
}

/// Options for [`load_csv`].
#[derive(Debug, Clone, Default)]
pub struct CsvOptions {
    /// Columns to ignore besides the label (e.g. an id column).
    pub drop_columns: Vec<String>,
}

pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    options: &CsvOptions,
) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, label_column, options)
}

pub fn read_csv(reader: impl Read, label_column: &str, options: &CsvOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(DataError::Empty);
    }
    let label_pos = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| DataError::MissingColumn(label_column.to_string()))?;
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != label_pos && !options.drop_columns.iter().any(|d| d == headers[i].trim()))
        .collect();
    let feature_names = feature_cols
        .iter()
        .map(|&i| headers[i].trim().to_string())
        .collect();

    let mut data = Vec::new();
    let mut labels_raw = Vec::new();
    let mut bad_rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(DataError::Ragged {
                row: r + 1,
                expected: headers.len(),
                got: rec.len(),
            });
        }
        let mut ok = true;
        let mut vals = Vec::with_capacity(feature_cols.len());
        for &c in &feature_cols {
            match rec[c].trim().parse::<f64>() {
                Ok(v) if v.is_finite() => vals.push(v),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            bad_rows.push(r + 1);
            continue;
        }
        data.extend(vals);
        labels_raw.push(rec[label_pos].trim().to_string());
    }
    if !bad_rows.is_empty() {
        return Err(DataError::Unparseable { rows: bad_rows });
    }
    if labels_raw.is_empty() {
        return Err(DataError::Empty);
    }
    // class ids follow the sorted label names, numerically when every name
    // parses as a number
    let mut label_names: Vec<String> = labels_raw.clone();
    label_names.sort();
    label_names.dedup();
    let numeric: Option<Vec<f64>> = label_names.iter().map(|l| l.parse::<f64>().ok()).collect();
    if let Some(v) = numeric {
        let mut pairs: Vec<(f64, String)> = v.into_iter().zip(label_names).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        label_names = pairs.into_iter().map(|p| p.1).collect();
    }
    let mapping: HashMap<&str, usize> = label_names
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let y: Vec<usize> = labels_raw.iter().map(|l| mapping[l.as_str()]).collect();
    if label_names.len() < 2 {
        return Err(DataError::SingleClass);
    }
    let n = y.len();
    Ok(Dataset {
        x: Matrix::from_vec(n, feature_cols.len(), data),
        y,
        class_count: label_names.len(),
        feature_names,
        label_names,
        ground_truth: None,
    })
}

/// Reads an unlabelled feature table: every column except `drop_columns`
/// (absent names are ignored) must be numeric.
pub fn read_features_csv(
    reader: impl Read,
    drop_columns: &[String],
) -> Result<(Vec<String>, Matrix)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols: Vec<usize> = (0..headers.len())
        .filter(|&i| !drop_columns.iter().any(|d| d == headers[i].trim()))
        .collect();
    let names = cols
        .iter()
        .map(|&i| headers[i].trim().to_string())
        .collect();
    let mut data = Vec::new();
    let mut rows = 0;
    let mut bad_rows = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let vals: Option<Vec<f64>> = cols
            .iter()
            .map(|&c| {
                rec.get(c)
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .filter(|v| v.is_finite())
            })
            .collect();
        match vals {
            Some(v) => {
                data.extend(v);
                rows += 1;
            }
            None => bad_rows.push(r + 1),
        }
    }
    if !bad_rows.is_empty() {
        return Err(DataError::Unparseable { rows: bad_rows });
    }
    if rows == 0 {
        return Err(DataError::Empty);
    }
    Ok((names, Matrix::from_vec(rows, cols.len(), data)))
}

pub fn load_features_csv(
    path: impl AsRef<Path>,
    drop_columns: &[String],
) -> Result<(Vec<String>, Matrix)> {
    read_features_csv(std::fs::File::open(path)?, drop_columns)
}

/// Writes features followed by a label column named `label_column`; labels
/// are written as their original names.
pub fn write_csv(ds: &Dataset, writer: impl Write, label_column: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = ds.feature_names.iter().map(String::as_str).collect();
    header.push(label_column);
    w.write_record(&header)?;
    let mut rec: Vec<String> = Vec::with_capacity(ds.features() + 1);
    for i in 0..ds.len() {
        rec.clear();
        rec.extend(ds.x.row(i).iter().map(|v| v.to_string()));
        rec.push(ds.label_names[ds.y[i]].clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_csv(ds, std::io::BufWriter::new(f), label_column)
}

/// Sidecar listing each sample's informative features, 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub kind: SynKind,
    pub seed: u64,
    pub indexing: String,
    pub class_one_label: usize,
    pub class_one_count: usize,
    pub class_two_count: usize,
    pub samples: Vec<Vec<usize>>,
}

impl TruthFile {
    pub fn new(ds: &Dataset, info: &SyntheticInfo) -> Self {
        let samples = ds
            .ground_truth
            .as_ref()
            .map(|gt| {
                gt.iter()
                    .map(|s| s.iter().map(|d| d + 1).collect())
                    .collect()
            })
            .unwrap_or_default();
        Self {
            kind: info.kind,
            seed: info.seed,
            indexing: "1-based".into(),
            class_one_label: info.class_one_label,
            class_one_count: info.class_one_count,
            class_two_count: info.class_two_count,
            samples,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t: TruthFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if t.indexing != "1-based" {
            return Err(DataError::BadTruth(format!(
                "unsupported indexing `{}`",
                t.indexing
            )));
        }
        if t.samples.iter().flatten().any(|&d| d == 0) {
            return Err(DataError::BadTruth("index 0 in a 1-based file".into()));
        }
        Ok(t)
    }

    /// 0-based ground truth for attaching to a dataset.
    pub fn zero_based(&self) -> Vec<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| s.iter().map(|d| d - 1).collect())
            .collect()
    }
}

/// Per-feature z-score statistics fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features with (numerically) zero spread; mapped to 0.
    pub constant: Vec<bool>,
}

const CONSTANT_STD: f64 = 1e-12;

impl Normalizer {
    /// Population statistics over the rows in `train_idx`.
    pub fn fit(x: &Matrix, train_idx: &[usize]) -> Self {
        assert!(!train_idx.is_empty(), "normalizer needs training rows");
        let d = x.cols();
        let n = train_idx.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in train_idx {
            for (m, &v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &i in train_idx {
            for ((s, &v), &m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.into_iter().map(|s| (s / n).sqrt()).collect();
        let constant = std.iter().map(|&s| s < CONSTANT_STD).collect();
        Self {
            mean,
            std,
            constant,
        }
    }

    pub fn transform(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..out.rows() {
            for (d, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = if self.constant[d] {
                    0.0
                } else {
                    (*v - self.mean[d]) / self.std[d]
                };
            }
        }
        out
    }
}

/// Fits on `train_idx` and returns the normaliser with the whole dataset
/// transformed by it.
pub fn fit_apply_normalizer(train_idx: &[usize], ds: &Dataset) -> (Normalizer, Dataset) {
    let norm = Normalizer::fit(&ds.x, train_idx);
    let x = norm.transform(&ds.x);
    (norm, ds.with_features(x))
}

/// Index sets of one (repeat, fold) run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRun {
    pub repeat: usize,
    pub fold: usize,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: usize,
    pub repeats: usize,
    pub val_frac: f64,
    pub seed: u64,
    /// `assignments[repeat][sample]` is the sample's test fold.
    pub assignments: Vec<Vec<usize>>,
    pub runs: Vec<SplitRun>,
}

/// Stratified `folds`-fold cross-validation repeated `repeats` times; each
/// run's validation set is drawn stratified from its training folds.
pub fn make_splits(
    ds: &Dataset,
    folds: usize,
    repeats: usize,
    val_frac: f64,
    seed_value: u64,
) -> Result<SplitPlan> {
    if folds < 2 {
        return Err(DataError::BadSplit(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    if repeats < 1 {
        return Err(DataError::BadSplit("need at least one repeat".into()));
    }
    if !(0.0..1.0).contains(&val_frac) {
        return Err(DataError::BadSplit(format!(
            "val_frac {val_frac} outside [0, 1)"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &l) in ds.y.iter().enumerate() {
        by_class[l].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < folds {
            return Err(DataError::ClassTooSmall {
                class,
                count: members.len(),
                folds,
            });
        }
    }

    let mut assignments = Vec::with_capacity(repeats);
    let mut runs = Vec::with_capacity(repeats * folds);
    for repeat in 0..repeats {
        let mut rng = seed::stream(seed_value, "folds", &[repeat as u64]);
        let mut fold_of = vec![0usize; ds.len()];
        // Round-robin continues across classes so fold sizes stay balanced.
        let mut next = 0usize;
        for members in &by_class {
            let mut m = members.clone();
            m.shuffle(&mut rng);
            for i in m {
                fold_of[i] = next % folds;
                next += 1;
            }
        }
        for fold in 0..folds {
            let test_idx: Vec<usize> = (0..ds.len()).filter(|&i| fold_of[i] == fold).collect();
            let rest: Vec<usize> = (0..ds.len()).filter(|&i| fold_of[i] != fold).collect();
            let mut vrng = seed::stream(seed_value, "validation", &[repeat as u64, fold as u64]);
            let (train_idx, val_idx) =
                stratified_holdout(&rest, &ds.y, ds.class_count, val_frac, &mut vrng);
            runs.push(SplitRun {
                repeat,
                fold,
                train_idx,
                val_idx,
                test_idx,
            });
        }
        assignments.push(fold_of);
    }
    Ok(SplitPlan {
        folds,
        repeats,
        val_frac,
        seed: seed_value,
        assignments,
        runs,
    })
}

fn stratified_holdout(
    pool: &[usize],
    y: &[usize],
    class_count: usize,
    frac: f64,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for &i in pool {
        by_class[y[i]].push(i);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for mut members in by_class {
        members.shuffle(rng);
        let mut take = (frac * members.len() as f64).round() as usize;
        // keep at least one training sample per class
        take = take.min(members.len().saturating_sub(1));
        val.extend_from_slice(&members[..take]);
        train.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn syn1_hand_example() {
        let mut x = vec![0.0; 100];
        x[10] = -0.5;
        x[0] = 1.0;
        x[1] = 1.0;
        x[2] = 0.0;
        let (logit, truth) = SynKind::Syn1.logit(&x);
        assert!((logit - std::f64::consts::E).abs() < 1e-12);
        assert!((1.0 / (1.0 + logit) - 0.268_941_421_369_995).abs() < 1e-12);
        assert_eq!(SynKind::Syn1.label(&x), 0);
        assert_eq!(truth, &[0, 1, 2, 10]);
    }

    #[test]
    fn tiny_logit_gives_positive_label() {
        let mut x = vec![0.0; 20];
        x[10] = -1.0;
        x[2] = 50.0; // exp(-50)
        assert_eq!(SynKind::Syn1.label(&x), 1);
    }

    #[test]
    fn quotas_and_label_consistency() {
        for kind in SynKind::ALL {
            let (ds, info) = gen_synthetic_default(kind, 3).unwrap();
            assert_eq!(ds.len(), 200);
            assert_eq!(ds.features(), 100);
            assert_eq!(ds.class_counts(), vec![150, 50]);
            for i in 0..ds.len() {
                assert_eq!(kind.label(ds.x.row(i)), ds.y[i]);
                let gt = &ds.ground_truth.as_ref().unwrap()[i];
                assert!(gt.iter().all(|&d| d <= 10));
                assert_eq!(info.low_branch[i], ds.x.get(i, 10) < 0.0);
            }
        }
    }

    #[test]
    fn syn3_truth_union() {
        let (ds, _) = gen_synthetic_default(SynKind::Syn3, 5).unwrap();
        let mut union: Vec<usize> = ds.ground_truth.unwrap().into_iter().flatten().collect();
        union.sort_unstable();
        union.dedup();
        assert_eq!(union, vec![0, 1, 6, 7, 8, 9, 10]);
    }

    #[test]
    fn generator_rejects_small_d() {
        assert!(matches!(
            gen_synthetic(SynKind::Syn1, 1, 1, 10, 0),
            Err(DataError::TooFewFeatures(10))
        ));
    }

    #[test]
    fn csv_toy_and_label_mapping() {
        let text = "f1,f2,label\n1,2,b\n3,4,a\n5,6,b\n";
        let ds = read_csv(text.as_bytes(), "label", &CsvOptions::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.features(), 2);
        assert_eq!(ds.y, vec![1, 0, 1]);
        assert_eq!(ds.label_names, vec!["a", "b"]);
        let numeric = read_csv(
            "f,y\n1,10\n2,9\n3,10\n".as_bytes(),
            "y",
            &CsvOptions::default(),
        )
        .unwrap();
        assert_eq!(numeric.label_names, vec!["9", "10"]);
        assert_eq!(numeric.y, vec![1, 0, 1]);
    }

    #[test]
    fn csv_errors() {
        let opts = CsvOptions::default();
        assert!(matches!(
            read_csv("".as_bytes(), "y", &opts),
            Err(DataError::Empty) | Err(DataError::MissingColumn(_))
        ));
        assert!(matches!(
            read_csv("a,y\n".as_bytes(), "y", &opts),
            Err(DataError::Empty)
        ));
        assert!(matches!(
            read_csv("a,b\n1,2\n".as_bytes(), "y", &opts),
            Err(DataError::MissingColumn(_))
        ));
        match read_csv("a,y\n1,0\nfoo,1\n2,1\n,0\n".as_bytes(), "y", &opts) {
            Err(DataError::Unparseable { rows }) => assert_eq!(rows, vec![2, 4]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            read_csv("a,y\n1,0\n2,0\n".as_bytes(), "y", &opts),
            Err(DataError::SingleClass)
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let (ds, _) = gen_synthetic(SynKind::Syn2, 20, 10, 15, 9).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf, "y").unwrap();
        let back = read_csv(buf.as_slice(), "y", &CsvOptions::default()).unwrap();
        assert_eq!(back.x, ds.x);
        assert_eq!(back.y, ds.y);
        assert_eq!(back.label_names, ds.label_names);
    }

    #[test]
    fn normalizer_arithmetic() {
        let x = Matrix::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0], vec![10.0, 7.0]]);
        let n = Normalizer::fit(&x, &[0, 1]);
        assert_eq!(n.mean, vec![2.0, 5.0]);
        assert_eq!(n.std, vec![1.0, 0.0]);
        assert_eq!(n.constant, vec![false, true]);
        let t = n.transform(&x);
        assert_eq!(t.row(0), &[-1.0, 0.0]);
        assert_eq!(t.row(1), &[1.0, 0.0]);
        // test row uses training statistics
        assert_eq!(t.row(2), &[8.0, 0.0]);
    }

    fn balanced(n: usize) -> Dataset {
        Dataset {
            x: Matrix::zeros(n, 1),
            y: (0..n).map(|i| i % 2).collect(),
            class_count: 2,
            feature_names: vec!["a".into()],
            label_names: vec!["0".into(), "1".into()],
            ground_truth: None,
        }
    }

    #[test]
    fn stratified_folds() {
        let ds = balanced(100);
        let plan = make_splits(&ds, 5, 5, 0.1, 1).unwrap();
        assert_eq!(plan.runs.len(), 25);
        for run in &plan.runs {
            let c1 = run.test_idx.iter().filter(|&&i| ds.y[i] == 1).count();
            assert_eq!(run.test_idx.len(), 20);
            assert_eq!(c1, 10);
            assert_eq!(run.val_idx.len(), 8);
        }
        assert_eq!(plan, make_splits(&ds, 5, 5, 0.1, 1).unwrap());
        assert_ne!(
            plan.assignments,
            make_splits(&ds, 5, 5, 0.1, 2).unwrap().assignments
        );
    }

    #[test]
    fn small_class_is_named() {
        let mut ds = balanced(20);
        ds.y[1] = 0;
        ds.y[3] = 0;
        ds.y[5] = 0;
        ds.y[7] = 0;
        ds.y[9] = 0;
        ds.y[11] = 0;
        ds.y[13] = 0;
        match make_splits(&ds, 5, 1, 0.1, 0) {
            Err(DataError::ClassTooSmall {
                class: 1,
                count: 3,
                folds: 5,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn two_folds_one_repeat() {
        let plan = make_splits(&balanced(10), 2, 1, 0.1, 0).unwrap();
        assert_eq!(plan.runs.len(), 2);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn splits_partition_without_leakage(
                counts in proptest::collection::vec(5usize..30, 2..4),
                seed in 0u64..1000,
            ) {
                let y: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
                let ds = Dataset {
                    x: Matrix::zeros(y.len(), 1),
                    class_count: counts.len(),
                    y,
                    feature_names: vec!["a".into()],
                    label_names: (0..counts.len()).map(|c| c.to_string()).collect(),
                    ground_truth: None,
                };
                let plan = make_splits(&ds, 5, 2, 0.1, seed).unwrap();
                for run in &plan.runs {
                    let mut all: Vec<usize> = run.train_idx.iter().chain(&run.val_idx).chain(&run.test_idx).copied().collect();
                    all.sort_unstable();
                    prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
                    for (c, &n) in counts.iter().enumerate() {
                        let in_test = run.test_idx.iter().filter(|&&i| ds.y[i] == c).count() as f64;
                        prop_assert!((in_test - n as f64 / 5.0).abs() <= 1.0);
                    }
                }
            }
        }
    }
}
