//! Trains on one synthetic split and prints timing and test metrics.
//!
//! `cargo run --release --example train_syn -- syn1 [max_iterations]`
//!
//! `CONFIG` may hold a JSON training-config patch, e.g. `{"tau": 1.0}`.

use protogate::data::{fit_apply_normalizer, gen_synthetic_default, make_splits, SynKind};
use protogate::metrics::{balanced_accuracy, f1_select};
use protogate::proto::{predict, SortMode};
use protogate::train::{infer_masks, train, TrainConfig};
use std::time::Instant;

fn main() {
    let mut args = std::env::args().skip(1);
    let kind: SynKind = args
        .next()
        .unwrap_or_else(|| "syn1".into())
        .parse()
        .expect("kind");
    let iters: usize = args
        .next()
        .map(|s| s.parse().expect("iterations"))
        .unwrap_or(10_000);
    let (ds, _) = gen_synthetic_default(kind, 7).expect("generate");
    let plan = make_splits(&ds, 5, 1, 0.2, 7).expect("splits");
    let run = &plan.runs[0];
    let (_, norm) = fit_apply_normalizer(&run.train_idx, &ds);
    let (tr, va, te) = (
        norm.subset(&run.train_idx),
        norm.subset(&run.val_idx),
        norm.subset(&run.test_idx),
    );
    let config = TrainConfig {
        max_iterations: iters,
        seed: 1,
        ..serde_json::from_str(&std::env::var("CONFIG").unwrap_or_else(|_| "{}".into()))
            .expect("CONFIG")
    };
    let t = Instant::now();
    let out = train(&tr, &va, &config).expect("train");
    let secs = t.elapsed().as_secs_f64();
    let (g, _, s) = infer_masks(&out.params, &te.x, config.eps_zero).expect("masks");
    let masked = protogate::model::mask_rows(&te.x, &s);
    let pred: Vec<usize> = (0..te.len())
        .map(|i| {
            predict(
                masked.row(i),
                &out.base,
                config.k,
                SortMode::Hard,
                config.delta,
                None,
            )
            .unwrap()
            .label
        })
        .collect();
    let acc = balanced_accuracy(&te.y, &pred, te.class_count).unwrap();
    let f1 = f1_select(&s, te.ground_truth.as_ref().unwrap()).unwrap();
    println!(
        "{kind}: {} steps in {secs:.2}s ({:.3} ms/step), best at {}, acc {acc:.3}, f1 {f1:.3}, global kept {}",
        out.iterations_run,
        1e3 * secs / out.iterations_run as f64,
        out.best_iteration,
        g.iter().filter(|&&v| v > 0.0).count()
    );
}
