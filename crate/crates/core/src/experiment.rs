//! Cross-validated experiments: split preparation, per-run training and
//! evaluation, grid search over training configurations, in-repo baselines
//! and aggregate tables.

use crate::baselines::{self, BaselineResult};
use crate::data::{self, DataError, Dataset, SplitPlan, SplitRun, SynKind};
use crate::exec::map_ordered;
use crate::metrics::{
    balanced_accuracy, composition, degree_of_local_sparsity, f1_select, f1_sets, mean_std,
    selection_stats, RunMetrics,
};
use crate::model::{infer, Inference, ModelError};
use crate::proto::PrototypeBase;
use crate::seed::derive_seed;
use crate::selector::GatingParams;
use crate::train::{train, TrainConfig, TrainError, TrainOutcome};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("run (repeat {repeat}, fold {fold}): {source}")]
    Run {
        repeat: usize,
        fold: usize,
        #[source]
        source: Box<ExperimentError>,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Proto(#[from] crate::proto::ProtoError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("empty grid")]
    EmptyGrid,
}

impl ExperimentError {
    /// Whether the root cause is a non-finite loss.
    pub fn is_numerical(&self) -> bool {
        match self {
            ExperimentError::Run { source, .. } => source.is_numerical(),
            ExperimentError::Train(TrainError::NumericalFailure { .. }) => true,
            _ => false,
        }
    }
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

/// Where the data of an experiment comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        kind: SynKind,
        /// Defaults to the manifest seed.
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default = "default_class_one")]
        class_one: usize,
        #[serde(default = "default_class_two")]
        class_two: usize,
        #[serde(default = "default_features")]
        features: usize,
    },
    Csv {
        path: PathBuf,
        label_column: String,
        #[serde(default)]
        drop_columns: Vec<String>,
        /// Optional `.truth.json` sidecar with 1-based informative indices.
        #[serde(default)]
        truth: Option<PathBuf>,
    },
}

fn default_class_one() -> usize {
    150
}

fn default_class_two() -> usize {
    50
}

fn default_features() -> usize {
    100
}

impl DatasetSpec {
    pub fn name(&self) -> String {
        match self {
            DatasetSpec::Synthetic { kind, .. } => kind.name().to_string(),
            DatasetSpec::Csv { path, .. } => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into()),
        }
    }

    pub fn load(&self, manifest_seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic {
                kind,
                seed,
                class_one,
                class_two,
                features,
            } => Ok(data::gen_synthetic(
                *kind,
                *class_one,
                *class_two,
                *features,
                seed.unwrap_or(manifest_seed),
            )?
            .0),
            DatasetSpec::Csv {
                path,
                label_column,
                drop_columns,
                truth,
            } => {
                let opts = data::CsvOptions {
                    drop_columns: drop_columns.clone(),
                };
                let mut ds = data::load_csv(path, label_column, &opts)?;
                if let Some(t) = truth {
                    let tf = data::TruthFile::load(t)?;
                    ds.ground_truth = Some(tf.zero_based());
                }
                Ok(ds)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub folds: usize,
    pub repeats: usize,
    pub val_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            folds: 5,
            repeats: 5,
            val_frac: 0.1,
        }
    }
}

/// Hyperparameter ranges; the grid is their Cartesian product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lambda_global: Vec<f64>,
    pub lambda_local: Vec<f64>,
    pub k: Vec<usize>,
    pub learning_rate: Vec<f64>,
}

impl GridSpec {
    pub fn synthetic() -> Self {
        Self {
            lambda_global: vec![1e-2, 1.5e-2, 2e-2],
            lambda_local: vec![0.0, 1e-4, 3e-4],
            k: vec![3],
            learning_rate: vec![1e-1],
        }
    }

    pub fn real_world() -> Self {
        Self {
            lambda_global: vec![1e-4, 2e-4, 3e-4, 4e-4, 6e-4],
            lambda_local: vec![1e-3],
            k: vec![1, 2, 3, 4, 5],
            learning_rate: vec![5e-2, 7.5e-2, 1e-1],
        }
    }

    pub fn single(config: &TrainConfig) -> Self {
        Self {
            lambda_global: vec![config.lambda_global],
            lambda_local: vec![config.lambda_local],
            k: vec![config.k],
            learning_rate: vec![config.learning_rate],
        }
    }

    pub fn len(&self) -> usize {
        self.lambda_global.len() * self.lambda_local.len() * self.k.len() * self.learning_rate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every combination applied to `base`, in lexicographic order of
    /// (lambda_global, lambda_local, k, learning_rate).
    pub fn expand(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let mut out = Vec::with_capacity(self.len());
        for &lg in &self.lambda_global {
            for &ll in &self.lambda_local {
                for &k in &self.k {
                    for &lr in &self.learning_rate {
                        out.push(TrainConfig {
                            lambda_global: lg,
                            lambda_local: ll,
                            k,
                            learning_rate: lr,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

/// Everything needed to reproduce an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    /// When present, the training config's searched fields come from the
    /// grid and the best validation configuration is reported.
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub splits: SplitSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub baselines: bool,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }
}

/// A split with normalisation fitted on its training rows.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub normalizer: data::Normalizer,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn prepare_split(ds: &Dataset, run: &SplitRun) -> PreparedSplit {
    let (normalizer, z) = data::fit_apply_normalizer(&run.train_idx, ds);
    PreparedSplit {
        normalizer,
        train: z.subset(&run.train_idx),
        val: z.subset(&run.val_idx),
        test: z.subset(&run.test_idx),
    }
}

/// Test-set metrics of a trained model.
pub fn evaluate(
    params: &GatingParams,
    base: &PrototypeBase,
    test: &Dataset,
    config: &TrainConfig,
    jobs: usize,
) -> Result<(RunMetrics, Inference)> {
    let inf = infer(
        params,
        base,
        &test.x,
        config.k,
        config.delta,
        config.eps_zero,
        jobs,
    )?;
    let pred: Vec<usize> = inf.predictions.iter().map(|p| p.label).collect();
    let f1 = match &test.ground_truth {
        Some(gt) => Some(f1_select(&inf.s_local, gt)?),
        None => None,
    };
    let metrics = RunMetrics {
        balanced_accuracy: balanced_accuracy(&test.y, &pred, test.class_count)?,
        selection: selection_stats(&inf.s_local),
        f1_select: f1,
        composition: composition(&inf.s_global, &inf.s_local)?,
        local_sparsity_q: degree_of_local_sparsity(&inf.s_local)?,
        global_selected: inf.s_global.iter().filter(|&&g| g > 0.0).count(),
    };
    Ok((metrics, inf))
}

/// Result of one (config, repeat, fold) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub config_index: usize,
    pub repeat: usize,
    pub fold: usize,
    pub seed: u64,
    pub val_balanced_accuracy: f64,
    pub test: RunMetrics,
    pub iterations_run: usize,
    pub best_iteration: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Seed of the training run at (`repeat`, `fold`); shared by all grid
/// configurations so they are compared on equal noise.
pub fn run_seed(root: u64, repeat: usize, fold: usize) -> u64 {
    derive_seed(root, "run", &[repeat as u64, fold as u64])
}

/// Trains and evaluates one configuration on one split.
pub fn run_one(
    ds: &Dataset,
    run: &SplitRun,
    config: &TrainConfig,
    root_seed: u64,
    config_index: usize,
) -> Result<(RunOutcome, TrainOutcome, PreparedSplit)> {
    let wrap = |e: ExperimentError| ExperimentError::Run {
        repeat: run.repeat,
        fold: run.fold,
        source: Box::new(e),
    };
    let split = prepare_split(ds, run);
    let config = TrainConfig {
        seed: run_seed(root_seed, run.repeat, run.fold),
        ..config.clone()
    };
    let outcome = train(&split.train, &split.val, &config).map_err(|e| wrap(e.into()))?;
    let (val_metrics, _) =
        evaluate(&outcome.params, &outcome.base, &split.val, &config, 1).map_err(wrap)?;
    let (test, _) =
        evaluate(&outcome.params, &outcome.base, &split.test, &config, 1).map_err(wrap)?;
    Ok((
        RunOutcome {
            config_index,
            repeat: run.repeat,
            fold: run.fold,
            seed: config.seed,
            val_balanced_accuracy: val_metrics.balanced_accuracy,
            test,
            iterations_run: outcome.iterations_run,
            best_iteration: outcome.best_iteration,
            best_val_loss: outcome.best_val_loss,
            stopped_early: outcome.stopped_early,
        },
        outcome,
        split,
    ))
}

/// Mean validation score of one grid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigScore {
    pub index: usize,
    pub config: TrainConfig,
    pub mean_val_balanced_accuracy: f64,
    pub std_val_balanced_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub scores: Vec<ConfigScore>,
    /// Highest mean validation balanced accuracy; ties go to the earlier
    /// configuration.
    pub best_index: usize,
    /// Runs of every configuration in (config, repeat, fold) order.
    pub runs: Vec<RunOutcome>,
}

impl GridReport {
    pub fn best_config(&self) -> &TrainConfig {
        &self.scores[self.best_index].config
    }

    pub fn best_runs(&self) -> Vec<RunOutcome> {
        self.runs
            .iter()
            .filter(|r| r.config_index == self.best_index)
            .cloned()
            .collect()
    }
}

/// Runs every configuration on every split of `plan`.
pub fn grid_search(
    ds: &Dataset,
    plan: &SplitPlan,
    configs: &[TrainConfig],
    root_seed: u64,
    jobs: usize,
) -> Result<GridReport> {
    if configs.is_empty() {
        return Err(ExperimentError::EmptyGrid);
    }
    let jobs_list: Vec<(usize, usize)> = (0..configs.len())
        .flat_map(|c| (0..plan.runs.len()).map(move |r| (c, r)))
        .collect();
    let results = map_ordered(&jobs_list, jobs, |&(c, r)| {
        run_one(ds, &plan.runs[r], &configs[c], root_seed, c).map(|(o, _, _)| o)
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let scores: Vec<ConfigScore> = configs
        .iter()
        .enumerate()
        .map(|(index, config)| {
            let vals: Vec<f64> = runs
                .iter()
                .filter(|r| r.config_index == index)
                .map(|r| r.val_balanced_accuracy)
                .collect();
            let (mean, std) = mean_std(&vals);
            ConfigScore {
                index,
                config: config.clone(),
                mean_val_balanced_accuracy: mean,
                std_val_balanced_accuracy: std,
            }
        })
        .collect();
    let mut best_index = 0;
    for s in &scores {
        if s.mean_val_balanced_accuracy > scores[best_index].mean_val_balanced_accuracy {
            best_index = s.index;
        }
    }
    Ok(GridReport {
        scores,
        best_index,
        runs,
    })
}

/// Cross-validates a single configuration.
pub fn cross_validate(
    ds: &Dataset,
    plan: &SplitPlan,
    config: &TrainConfig,
    root_seed: u64,
    jobs: usize,
) -> Result<Vec<RunOutcome>> {
    Ok(grid_search(ds, plan, std::slice::from_ref(config), root_seed, jobs)?.runs)
}

/// Baseline scores on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub method: String,
    pub repeat: usize,
    pub fold: usize,
    pub val_balanced_accuracy: f64,
    pub test_balanced_accuracy: f64,
    pub f1_select: Option<f64>,
    pub selected: usize,
}

fn baseline_record(r: BaselineResult, run: &SplitRun, test: &Dataset) -> Result<BaselineRun> {
    let f1 = test
        .ground_truth
        .as_ref()
        .map(|gt| gt.iter().map(|t| f1_sets(&r.selected, t)).sum::<f64>() / gt.len() as f64);
    Ok(BaselineRun {
        repeat: run.repeat,
        fold: run.fold,
        val_balanced_accuracy: r.val_balanced_accuracy,
        test_balanced_accuracy: balanced_accuracy(&test.y, &r.test_predictions, test.class_count)?,
        f1_select: f1,
        selected: r.selected.len(),
        method: r.method,
    })
}

/// Both in-repo baselines on every split, with `k` neighbours.
pub fn baseline_runs(
    ds: &Dataset,
    plan: &SplitPlan,
    k: usize,
    delta: f64,
    jobs: usize,
) -> Result<Vec<BaselineRun>> {
    let per_split = map_ordered(&plan.runs, jobs, |run| -> Result<Vec<BaselineRun>> {
        let s = prepare_split(ds, run);
        let all = baselines::knn_all_features(&s.train, &s.val, &s.test, k, delta)?;
        let corr = baselines::corr_topk_knn(&s.train, &s.val, &s.test, k, delta)?;
        Ok(vec![
            baseline_record(all, run, &s.test)?,
            baseline_record(corr, run, &s.test)?,
        ])
    });
    let mut out = Vec::new();
    for r in per_split {
        out.extend(r?);
    }
    // method-major order
    out.sort_by(|a, b| (&a.method, a.repeat, a.fold).cmp(&(&b.method, b.repeat, b.fold)));
    Ok(out)
}

pub const PROTOGATE: &str = "protogate";

/// One line of the aggregate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

fn push_stat(rows: &mut Vec<AggregateRow>, dataset: &str, method: &str, metric: &str, xs: &[f64]) {
    let (mean, std) = mean_std(xs);
    rows.push(AggregateRow {
        dataset: dataset.into(),
        method: method.into(),
        metric: metric.into(),
        mean,
        std,
    });
}

/// Mean and population standard deviation of the run metrics.
pub fn summarize_runs(dataset: &str, method: &str, runs: &[RunOutcome]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    let col = |f: &dyn Fn(&RunOutcome) -> f64| runs.iter().map(f).collect::<Vec<f64>>();
    push_stat(
        &mut rows,
        dataset,
        method,
        "balanced_accuracy",
        &col(&|r| r.test.balanced_accuracy),
    );
    if runs.iter().all(|r| r.test.f1_select.is_some()) && !runs.is_empty() {
        push_stat(
            &mut rows,
            dataset,
            method,
            "f1_select",
            &col(&|r| r.test.f1_select.unwrap_or(f64::NAN)),
        );
    }
    push_stat(
        &mut rows,
        dataset,
        method,
        "mean_selected",
        &col(&|r| r.test.selection.mean_selected),
    );
    push_stat(
        &mut rows,
        dataset,
        method,
        "mean_proportion",
        &col(&|r| r.test.selection.mean_proportion),
    );
    push_stat(
        &mut rows,
        dataset,
        method,
        "local_sparsity_q",
        &col(&|r| r.test.local_sparsity_q),
    );
    push_stat(
        &mut rows,
        dataset,
        method,
        "both_selected",
        &col(&|r| r.test.composition.both_selected),
    );
    push_stat(
        &mut rows,
        dataset,
        method,
        "locally_recovered",
        &col(&|r| r.test.composition.locally_recovered),
    );
    push_stat(
        &mut rows,
        dataset,
        method,
        "global_selected",
        &col(&|r| r.test.global_selected as f64),
    );
    push_stat(
        &mut rows,
        dataset,
        method,
        "val_balanced_accuracy",
        &col(&|r| r.val_balanced_accuracy),
    );
    rows
}

pub fn summarize_baselines(dataset: &str, runs: &[BaselineRun]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    let mut methods: Vec<&str> = runs.iter().map(|r| r.method.as_str()).collect();
    methods.dedup();
    for m in methods {
        let rs: Vec<&BaselineRun> = runs.iter().filter(|r| r.method == m).collect();
        let acc: Vec<f64> = rs.iter().map(|r| r.test_balanced_accuracy).collect();
        push_stat(&mut rows, dataset, m, "balanced_accuracy", &acc);
        if rs.iter().all(|r| r.f1_select.is_some()) {
            let f1: Vec<f64> = rs.iter().map(|r| r.f1_select.unwrap_or(f64::NAN)).collect();
            push_stat(&mut rows, dataset, m, "f1_select", &f1);
        }
        let sel: Vec<f64> = rs.iter().map(|r| r.selected as f64).collect();
        push_stat(&mut rows, dataset, m, "mean_selected", &sel);
    }
    rows
}

pub const AGGREGATE_HEADER: &str = "dataset,method,metric,mean,std";

pub fn write_aggregate_csv(rows: &[AggregateRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{AGGREGATE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.dataset, r.method, r.metric, r.mean, r.std
        )?;
    }
    Ok(())
}

/// Looks up `(method, metric)` in an aggregate table.
pub fn lookup<'a>(
    rows: &'a [AggregateRow],
    method: &str,
    metric: &str,
) -> Option<&'a AggregateRow> {
    rows.iter()
        .find(|r| r.method == method && r.metric == metric)
}

/// Outcome of a full manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub dataset: String,
    pub plan: SplitPlan,
    pub grid: Option<GridReport>,
    pub chosen: TrainConfig,
    pub runs: Vec<RunOutcome>,
    pub baselines: Vec<BaselineRun>,
    pub aggregate: Vec<AggregateRow>,
}

/// Loads the data, splits it, runs the grid (or the single configuration)
/// and the baselines, and aggregates the chosen configuration's runs.
pub fn run_experiment(manifest: &ExperimentManifest, jobs: usize) -> Result<ExperimentReport> {
    let ds = manifest.dataset.load(manifest.seed)?;
    let name = manifest.dataset.name();
    let sp = manifest.splits;
    let plan = data::make_splits(&ds, sp.folds, sp.repeats, sp.val_frac, manifest.seed)?;
    manifest.train.validate()?;
    let (grid, chosen, runs) = match &manifest.grid {
        Some(g) => {
            if g.is_empty() {
                return Err(ExperimentError::EmptyGrid);
            }
            let configs = g.expand(&manifest.train);
            for c in &configs {
                c.validate()?;
            }
            let report = grid_search(&ds, &plan, &configs, manifest.seed, jobs)?;
            let chosen = report.best_config().clone();
            let runs = report.best_runs();
            (Some(report), chosen, runs)
        }
        None => {
            let runs = cross_validate(&ds, &plan, &manifest.train, manifest.seed, jobs)?;
            (None, manifest.train.clone(), runs)
        }
    };
    let baselines = if manifest.baselines {
        baseline_runs(&ds, &plan, chosen.k, chosen.delta, jobs)?
    } else {
        Vec::new()
    };
    let mut aggregate = summarize_runs(&name, PROTOGATE, &runs);
    aggregate.extend(summarize_baselines(&name, &baselines));
    Ok(ExperimentReport {
        dataset: name,
        plan,
        grid,
        chosen,
        runs,
        baselines,
        aggregate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes_and_order() {
        let base = TrainConfig::default();
        let syn = GridSpec::synthetic().expand(&base);
        assert_eq!(syn.len(), 9);
        assert_eq!((syn[0].lambda_global, syn[0].lambda_local), (1e-2, 0.0));
        assert_eq!((syn[1].lambda_global, syn[1].lambda_local), (1e-2, 1e-4));
        assert!(syn.iter().all(|c| c.k == 3 && c.learning_rate == 0.1));
        assert_eq!(GridSpec::real_world().len(), 75);
        assert_eq!(GridSpec::single(&base).expand(&base), vec![base]);
    }

    #[test]
    fn manifest_round_trips() {
        let m = ExperimentManifest {
            dataset: DatasetSpec::Synthetic {
                kind: SynKind::Syn2,
                seed: None,
                class_one: 150,
                class_two: 50,
                features: 100,
            },
            train: TrainConfig::default(),
            grid: Some(GridSpec::synthetic()),
            splits: SplitSpec::default(),
            seed: 3,
            baselines: true,
            out: None,
        };
        let back: ExperimentManifest = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(back, m);
        let minimal: ExperimentManifest =
            serde_json::from_str(r#"{"dataset": {"type": "synthetic", "kind": "syn1"}}"#).unwrap();
        assert_eq!(minimal.splits, SplitSpec::default());
        assert_eq!(minimal.train, TrainConfig::default());
    }

    #[test]
    fn aggregate_csv_layout() {
        let rows = vec![AggregateRow {
            dataset: "syn1".into(),
            method: "m".into(),
            metric: "balanced_accuracy".into(),
            mean: 0.5,
            std: 0.25,
        }];
        let mut buf = Vec::new();
        write_aggregate_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "dataset,method,metric,mean,std\nsyn1,m,balanced_accuracy,0.5,0.25\n"
        );
    }
}
