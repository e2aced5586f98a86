use crate::args::{
    DataArgs, ExplainArgs, GenSynthArgs, GridArgs, GridPreset, RunArgs, TrainArgs, VerifyArgs,
};
use crate::failure::Failure;
use protogate::data::{self, TruthFile};
use protogate::diffcore::with_broken_tanh_adjoint;
use protogate::experiment::{
    self, run_experiment, write_aggregate_csv, DatasetSpec, ExperimentManifest, ExperimentReport,
    GridSpec,
};
use protogate::model::{explanations, infer, BaseFile, Checkpoint};
use protogate::train::{write_history, TrainConfig};
use protogate::verify::{self, Sizes};
use serde::Serialize;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

type Result<T> = std::result::Result<T, Failure>;

pub const DEFAULT_OUT: &str = "out";
pub const DEFAULT_LABEL: &str = "y";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Failure::data(e).context(format!("creating {}", dir.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(Failure::data)?;
    fs::write(path, s + "\n")
        .map_err(|e| Failure::data(e).context(format!("writing {}", path.display())))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
{
    let ctx = || format!("writing {}", path.display());
    let file = fs::File::create(path).map_err(|e| Failure::data(e).context(ctx()))?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(|e| Failure::data(e).context(ctx()))
}

pub fn gen_synth(a: &GenSynthArgs) -> Result<()> {
    let kind: data::SynKind = a.kind.into();
    let (ds, info) = data::gen_synthetic(kind, a.class_one, a.class_two, a.features, a.seed)?;
    create_dir(&a.out)?;
    let csv = a.out.join(format!("{}.csv", kind.name()));
    let truth = a.out.join(format!("{}.truth.json", kind.name()));
    data::save_csv(&ds, &csv, &a.label_col)
        .map_err(|e| Failure::data(e).context(format!("writing {}", csv.display())))?;
    TruthFile::new(&ds, &info)
        .save(&truth)
        .map_err(|e| Failure::data(e).context(format!("writing {}", truth.display())))?;
    println!(
        "wrote {} ({} x {}) and {}",
        csv.display(),
        ds.len(),
        ds.features(),
        truth.display()
    );
    Ok(())
}

fn apply_train_args(c: &mut TrainConfig, t: &TrainArgs) {
    macro_rules! set {
        ($($f:ident),*) => {$( if let Some(v) = t.$f { c.$f = v; } )*};
    }
    set!(
        lambda_global,
        lambda_local,
        k,
        learning_rate,
        weight_decay,
        batch_size,
        max_iterations,
        patience,
        sigma,
        tau,
        hidden,
        eval_every
    );
}

/// Resolves the manifest from `--config` and the command-line overrides.
pub fn resolve_manifest(
    d: &DataArgs,
    t: &TrainArgs,
    baselines: bool,
) -> Result<ExperimentManifest> {
    let mut m = match &d.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                Failure::usage(e).context(format!("reading config {}", path.display()))
            })?;
            serde_json::from_str::<ExperimentManifest>(&text).map_err(|e| {
                Failure::usage(e).context(format!("parsing config {}", path.display()))
            })?
        }
        None => {
            let dataset = match (&d.dataset, d.kind) {
                (Some(path), _) => DatasetSpec::Csv {
                    path: path.clone(),
                    label_column: DEFAULT_LABEL.into(),
                    drop_columns: Vec::new(),
                    truth: None,
                },
                (None, Some(kind)) => DatasetSpec::Synthetic {
                    kind: kind.into(),
                    seed: None,
                    class_one: 150,
                    class_two: 50,
                    features: 100,
                },
                (None, None) => {
                    return Err(Failure::usage(anyhow::anyhow!(
                        "no data: pass --dataset, --kind or --config"
                    )))
                }
            };
            ExperimentManifest {
                dataset,
                train: TrainConfig::default(),
                grid: None,
                splits: Default::default(),
                seed: 0,
                baselines: false,
                out: None,
            }
        }
    };
    if d.config.is_some() {
        if let Some(path) = &d.dataset {
            m.dataset = DatasetSpec::Csv {
                path: path.clone(),
                label_column: DEFAULT_LABEL.into(),
                drop_columns: Vec::new(),
                truth: None,
            };
        } else if let Some(kind) = d.kind {
            m.dataset = DatasetSpec::Synthetic {
                kind: kind.into(),
                seed: None,
                class_one: 150,
                class_two: 50,
                features: 100,
            };
        }
    }
    if let DatasetSpec::Csv {
        label_column,
        drop_columns,
        truth,
        ..
    } = &mut m.dataset
    {
        if let Some(l) = &d.label_col {
            *label_column = l.clone();
        }
        drop_columns.extend(d.drop_col.iter().cloned());
        if d.truth.is_some() {
            *truth = d.truth.clone();
        }
    }
    if let Some(s) = d.seed {
        m.seed = s;
    }
    if let Some(f) = d.folds {
        m.splits.folds = f;
    }
    if let Some(r) = d.repeats {
        m.splits.repeats = r;
    }
    if let Some(v) = d.val_frac {
        m.splits.val_frac = v;
    }
    if let Some(o) = &d.out {
        m.out = Some(o.clone());
    }
    m.out.get_or_insert_with(|| PathBuf::from(DEFAULT_OUT));
    m.baselines |= baselines;
    apply_train_args(&mut m.train, t);
    m.train.seed = m.seed;
    m.train.validate()?;
    Ok(m)
}

fn out_dir(m: &ExperimentManifest) -> PathBuf {
    m.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn load_dataset(m: &ExperimentManifest) -> Result<data::Dataset> {
    m.dataset
        .load(m.seed)
        .map_err(|e| Failure::from(e).context(format!("loading dataset `{}`", m.dataset.name())))
}

pub fn train(a: &RunArgs) -> Result<()> {
    let m = resolve_manifest(&a.data, &a.train, false)?;
    let ds = load_dataset(&m)?;
    let plan = data::make_splits(
        &ds,
        m.splits.folds,
        m.splits.repeats,
        m.splits.val_frac,
        m.seed,
    )
    .map_err(|e| Failure::from(e).context("building splits"))?;
    let out = out_dir(&m);
    create_dir(&out)?;
    write_json(&out.join("manifest.json"), &m)?;

    let run = &plan.runs[0];
    let (outcome_row, outcome, split) = experiment::run_one(&ds, run, &m.train, m.seed, 0)
        .map_err(|e| Failure::from(e).context("training"))?;
    let config = TrainConfig {
        seed: outcome_row.seed,
        ..m.train.clone()
    };
    // prototype sources point at rows of the input dataset
    let mut base = outcome.base.clone();
    base.sources = run.train_idx.clone();
    let (_, inf) = experiment::evaluate(&outcome.params, &base, &split.test, &config, a.data.jobs)?;

    Checkpoint::new(
        &outcome.params,
        &config,
        Some(split.normalizer.clone()),
        ds.feature_names.clone(),
        ds.label_names.clone(),
    )
    .save(out.join("checkpoint.json"))?;
    BaseFile::new(base, ds.label_names.clone()).save(out.join("base.json"))?;
    write_with(&out.join("history.csv"), |w| {
        write_history(&outcome.history, w)
    })?;
    write_json(&out.join("metrics.json"), &outcome_row)?;
    let mut records = explanations(&inf, &ds.feature_names, &ds.label_names);
    for r in &mut records {
        r.query_id = run.test_idx[r.query_id];
    }
    write_json(&out.join("explanations.json"), &records)?;
    write_json(&out.join("split.json"), run)?;

    println!(
        "test balanced accuracy {:.4}; {} of {} features kept globally; best iteration {} of {}; outputs in {}",
        outcome_row.test.balanced_accuracy,
        outcome_row.test.global_selected,
        ds.features(),
        outcome_row.best_iteration,
        outcome_row.iterations_run,
        out.display()
    );
    Ok(())
}

fn write_report(out: &Path, m: &ExperimentManifest, r: &ExperimentReport) -> Result<()> {
    write_json(&out.join("splits.json"), &r.plan)?;
    write_json(&out.join("runs.json"), &r.runs)?;
    write_json(&out.join("chosen_config.json"), &r.chosen)?;
    if m.baselines {
        write_json(&out.join("baselines.json"), &r.baselines)?;
    }
    write_with(&out.join("aggregate.csv"), |w| {
        write_aggregate_csv(&r.aggregate, w)
    })?;
    if let Some(g) = &r.grid {
        write_with(&out.join("grid.csv"), |w| {
            use std::io::Write;
            writeln!(w, "index,lambda_global,lambda_local,k,learning_rate,mean_val_balanced_accuracy,std_val_balanced_accuracy")?;
            for s in &g.scores {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    s.index,
                    s.config.lambda_global,
                    s.config.lambda_local,
                    s.config.k,
                    s.config.learning_rate,
                    s.mean_val_balanced_accuracy,
                    s.std_val_balanced_accuracy
                )?;
            }
            Ok(())
        })?;
        write_json(&out.join("grid_runs.json"), &g.runs)?;
    }
    println!(
        "{:<16} {:<26} {:>10} {:>10}",
        "method", "metric", "mean", "std"
    );
    for row in &r.aggregate {
        println!(
            "{:<16} {:<26} {:>10.4} {:>10.4}",
            row.method, row.metric, row.mean, row.std
        );
    }
    println!("{} runs; outputs in {}", r.runs.len(), out.display());
    Ok(())
}

fn run_and_report(m: ExperimentManifest, jobs: usize) -> Result<()> {
    let out = out_dir(&m);
    create_dir(&out)?;
    write_json(&out.join("manifest.json"), &m)?;
    let report = run_experiment(&m, jobs)?;
    write_report(&out, &m, &report)
}

pub fn cv(a: &RunArgs) -> Result<()> {
    let mut m = resolve_manifest(&a.data, &a.train, a.baselines)?;
    m.grid = None;
    run_and_report(m, a.data.jobs)
}

pub fn grid(a: &GridArgs) -> Result<()> {
    let mut m = resolve_manifest(&a.run.data, &a.run.train, a.run.baselines)?;
    if m.grid.is_none() {
        m.grid = Some(match a.grid {
            GridPreset::Synthetic => GridSpec::synthetic(),
            GridPreset::RealWorld => GridSpec::real_world(),
        });
    }
    run_and_report(m, a.run.data.jobs)
}

pub fn explain(a: &ExplainArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint).map_err(|e| {
        Failure::from(e).context(format!("loading checkpoint {}", a.checkpoint.display()))
    })?;
    let params = ckpt.params()?;
    let base = BaseFile::load(&a.base)
        .map_err(|e| Failure::from(e).context(format!("loading base {}", a.base.display())))?;
    let mut drop = a.drop_col.clone();
    drop.push(a.label_col.clone());
    let (names, x) = data::load_features_csv(&a.queries, &drop).map_err(|e| {
        Failure::from(e).context(format!("reading queries {}", a.queries.display()))
    })?;
    if x.cols() != ckpt.features {
        return Err(Failure::data(anyhow::anyhow!(
            "queries have {} feature columns, the checkpoint expects {}",
            x.cols(),
            ckpt.features
        )));
    }
    if !ckpt.feature_names.is_empty() && names != ckpt.feature_names {
        eprintln!(
            "warning: query column names differ from the training columns; matching by position"
        );
    }
    let z = match &ckpt.normalizer {
        Some(n) => n.transform(&x),
        None => x,
    };
    let c = &ckpt.config;
    let inf = infer(&params, &base.base, &z, c.k, c.delta, c.eps_zero, a.jobs)?;
    let records = explanations(&inf, &ckpt.feature_names, &base.label_names);
    create_dir(&a.out)?;
    let path = a.out.join("explanations.json");
    write_json(&path, &records)?;
    println!(
        "explained {} queries; wrote {}",
        records.len(),
        path.display()
    );
    Ok(())
}

/// Runs the verification suite; returns whether every check passed.
pub fn verify(a: &VerifyArgs) -> Result<bool> {
    let sizes = if a.quick {
        Sizes {
            grad_instances: 10,
            sort_trials: 100,
            loss_trials: 50,
            l0_vectors: 5,
            l0_draws: 20_000,
            knn_queries: 100,
        }
    } else {
        Sizes::FULL
    };
    let results = if a.inject_tanh_fault {
        with_broken_tanh_adjoint(|| verify::run_all(sizes, a.seed))
    } else {
        verify::run_all(sizes, a.seed)
    };
    print!("{}", verify::format_table(&results));
    let passed = results.iter().all(|r| r.passed);
    println!(
        "{}",
        if passed {
            "all checks passed"
        } else {
            "some checks FAILED"
        }
    );
    Ok(passed)
}
