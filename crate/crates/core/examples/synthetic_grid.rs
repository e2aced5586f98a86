//! Runs the synthetic grid with 5x5 cross-validation and baselines on one
//! synthetic family, printing the aggregate table.
//!
//! `cargo run --release --example synthetic_grid -- syn1 [seed]`

use protogate::data::SynKind;
use protogate::experiment::{
    run_experiment, write_aggregate_csv, DatasetSpec, ExperimentManifest, GridSpec, SplitSpec,
};
use protogate::train::TrainConfig;
use std::time::Instant;

fn main() {
    let mut args = std::env::args().skip(1);
    let kind: SynKind = args
        .next()
        .unwrap_or_else(|| "syn1".into())
        .parse()
        .expect("kind");
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);
    let manifest = ExperimentManifest {
        dataset: DatasetSpec::Synthetic {
            kind,
            seed: None,
            class_one: 150,
            class_two: 50,
            features: 100,
        },
        train: TrainConfig::default(),
        grid: Some(GridSpec::synthetic()),
        splits: SplitSpec::default(),
        seed,
        baselines: true,
        out: None,
    };
    let t = Instant::now();
    let report = run_experiment(&manifest, 0).expect("experiment");
    eprintln!("{kind}: {:.1}s", t.elapsed().as_secs_f64());
    if let Some(g) = &report.grid {
        for s in &g.scores {
            eprintln!(
                "  lg={} ll={} val={:.4}",
                s.config.lambda_global, s.config.lambda_local, s.mean_val_balanced_accuracy
            );
        }
        let its: Vec<usize> = g.runs.iter().map(|r| r.iterations_run).collect();
        eprintln!(
            "  mean iterations {:.0}",
            its.iter().sum::<usize>() as f64 / its.len() as f64
        );
    }
    write_aggregate_csv(&report.aggregate, std::io::stdout()).unwrap();
}
