//! Sequential vs data-parallel throughput of the fan-out points: batch
//! inference, cross-validation runs and the baselines.
//!
//! `jobs = 1` is the sequential path. Built with `--no-default-features`
//! both variants run sequentially, which makes the comparison a baseline
//! for the pool overhead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use protogate::data::{gen_synthetic, make_splits, SynKind};
use protogate::exec::parallel_enabled;
use protogate::experiment::{baseline_runs, cross_validate, prepare_split};
use protogate::model::infer;
use protogate::train::{train, TrainConfig};
use std::hint::black_box;

const WIDTHS: [(&str, usize); 2] = [("sequential", 1), ("parallel", 0)];

fn label(name: &str) -> String {
    if parallel_enabled() {
        name.to_string()
    } else {
        format!("{name}-nofeature")
    }
}

fn inference(c: &mut Criterion) {
    let (ds, _) = gen_synthetic(SynKind::Syn1, 600, 200, 100, 1).unwrap();
    let plan = make_splits(&ds, 2, 1, 0.1, 1).unwrap();
    let s = prepare_split(&ds, &plan.runs[0]);
    let config = TrainConfig {
        max_iterations: 50,
        ..TrainConfig::default()
    };
    let out = train(&s.train, &s.val, &config).unwrap();
    let mut g = c.benchmark_group("batch_inference");
    for (name, jobs) in WIDTHS {
        g.bench_function(BenchmarkId::new(label(name), s.test.len()), |b| {
            b.iter(|| {
                infer(
                    &out.params,
                    &out.base,
                    black_box(&s.test.x),
                    3,
                    config.delta,
                    config.eps_zero,
                    jobs,
                )
                .unwrap()
            })
        });
    }
    g.finish();
}

fn cross_validation(c: &mut Criterion) {
    let (ds, _) = gen_synthetic(SynKind::Syn2, 150, 50, 100, 2).unwrap();
    let plan = make_splits(&ds, 4, 1, 0.1, 2).unwrap();
    let config = TrainConfig {
        max_iterations: 30,
        hidden: 32,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("cross_validation");
    g.sample_size(10);
    for (name, jobs) in WIDTHS {
        g.bench_function(BenchmarkId::new(label(name), plan.runs.len()), |b| {
            b.iter(|| cross_validate(black_box(&ds), &plan, &config, 2, jobs).unwrap())
        });
    }
    g.finish();
}

fn baselines(c: &mut Criterion) {
    let (ds, _) = gen_synthetic(SynKind::Syn3, 150, 50, 100, 3).unwrap();
    let plan = make_splits(&ds, 5, 1, 0.1, 3).unwrap();
    let mut g = c.benchmark_group("baselines");
    g.sample_size(10);
    for (name, jobs) in WIDTHS {
        g.bench_function(BenchmarkId::new(label(name), plan.runs.len()), |b| {
            b.iter(|| baseline_runs(black_box(&ds), &plan, 3, 1e-9, jobs).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, inference, cross_validation, baselines);
criterion_main!(benches);
