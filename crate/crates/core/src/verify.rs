//! Self-verification suite: gradient checks, relaxed-sort limits, the ℓ0
//! surrogate identity, the loss-count property, hybrid-sort parity and KNN
//! degeneracy, each against an independent reference.

use crate::data::{gen_synthetic, make_splits, SynKind};
use crate::diffcore::grad_check;
use crate::experiment::prepare_split;
use crate::model::infer;
use crate::proto::{
    build_base, hybrid_parity_check, predict, prediction_loss, relaxed_sort, PrototypeBase,
    SortMode,
};
use crate::seed;
use crate::selector::{expected_l0, local_mask_train, GatingParams, NoiseSpec};
use crate::tensor::Matrix;
use crate::train::{record_objective, train, TrainConfig};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub tolerance: String,
    pub observed: String,
    pub passed: bool,
    pub seconds: f64,
}

fn timed(name: &str, tolerance: String, f: impl FnOnce() -> (bool, String)) -> CheckResult {
    let t = Instant::now();
    let (passed, observed) = f();
    CheckResult {
        name: name.into(),
        tolerance,
        observed,
        passed,
        seconds: t.elapsed().as_secs_f64(),
    }
}

/// Sizes of the verification workloads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sizes {
    pub grad_instances: usize,
    pub sort_trials: usize,
    pub loss_trials: usize,
    pub l0_vectors: usize,
    pub l0_draws: usize,
    pub knn_queries: usize,
}

impl Sizes {
    pub const FULL: Sizes = Sizes {
        grad_instances: 100,
        sort_trials: 1000,
        loss_trials: 200,
        l0_vectors: 50,
        l0_draws: 100_000,
        knn_queries: 1000,
    };
}

/// Analytic vs central-difference gradients of the batch objective on
/// random instances with `N = 8`, `D = 10`, hidden width 6.
pub fn gradient_fidelity(instances: usize, root: u64) -> CheckResult {
    let (h, tol) = (1e-5, 1e-4);
    timed(
        "gradient fidelity",
        format!("max rel err < {tol:e} (h = {h:e})"),
        || {
            let mut worst = 0.0f64;
            let mut checked = 0;
            let mut skipped = 0;
            let mut failed = 0;
            for i in 0..instances {
                let mut rng = seed::stream(root, "grad-check", &[i as u64]);
                let (b, d, hid) = (8, 10, 6);
                let mut params = GatingParams::init(d, hid, &mut rng);
                for t in params.tensors_mut() {
                    for w in t.as_mut_slice() {
                        *w = rng.random_range(-0.6..0.6);
                    }
                }
                let x = Matrix::from_vec(
                    b,
                    d,
                    (0..b * d)
                        .map(|_| StandardNormal.sample(&mut rng))
                        .collect(),
                );
                let y: Vec<usize> = (0..b).map(|j| (j + rng.random_range(0..2)) % 2).collect();
                let eps = NoiseSpec::default().sample(b, d, &mut rng);
                let config = TrainConfig {
                    k: 1 + i % 4,
                    lambda_local: [0.0, 0.05, 0.5][i % 3],
                    tau: [16.0, 1.0, 0.25][i % 3],
                    ..TrainConfig::default()
                };
                let mut rec = match record_objective(&params, &x, &y, &eps, &config) {
                    Ok(r) => r,
                    Err(_) => {
                        failed += 1;
                        continue;
                    }
                };
                match grad_check(&mut rec.tape, &rec.params.all(), h, tol) {
                    Ok(report) => {
                        worst = worst.max(report.max_rel_error());
                        checked += report.checked();
                        skipped += report.skipped();
                        failed += report.failed();
                    }
                    Err(_) => failed += 1,
                }
            }
            (
            failed == 0 && checked > 0,
            format!("max rel err {worst:.2e}; {checked} checked, {skipped} skipped at kinks, {failed} failed"),
        )
        },
    )
}

fn distinct_vector(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        if s.windows(2).all(|w| w[0] != w[1]) {
            return v;
        }
    }
}

/// Relaxed permutation at `tau = 1e-4`: row argmax equals the descending
/// argsort and rows are stochastic.
pub fn relaxed_sort_limit(trials: usize, root: u64) -> CheckResult {
    let tau = 1e-4;
    timed(
        "relaxed sort limit",
        "argmax == argsort in 100%; |row sum - 1| < 1e-9".into(),
        || {
            let mut rng = seed::stream(root, "sort-limit", &[]);
            let mut agree = 0;
            let mut worst_sum = 0.0f64;
            for _ in 0..trials {
                let n = rng.random_range(2..=64);
                let v = distinct_vector(&mut rng, n);
                let Ok(p) = relaxed_sort(&v, tau) else {
                    continue;
                };
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
                if p.row_argmax() == order {
                    agree += 1;
                }
                for r in 0..n {
                    worst_sum = worst_sum.max((p.matrix.row(r).iter().sum::<f64>() - 1.0).abs());
                }
            }
            (
                agree == trials && worst_sum < 1e-9,
                format!("{agree}/{trials} agree; max |row sum - 1| {worst_sum:.1e}"),
            )
        },
    )
}

fn random_base(rng: &mut impl Rng, n: usize, d: usize, classes: usize) -> PrototypeBase {
    let x = Matrix::from_vec(
        n,
        d,
        (0..n * d).map(|_| StandardNormal.sample(rng)).collect(),
    );
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    build_base(x, y, (0..n).collect()).expect("valid base")
}

/// At `tau = 1e-4` the prediction loss counts label mismatches among the
/// `K` nearest prototypes.
pub fn loss_count(trials: usize, root: u64) -> CheckResult {
    let tau = 1e-4;
    timed(
        "loss counts mismatches",
        "|loss - count| < 1e-2 in every trial".into(),
        || {
            let mut rng = seed::stream(root, "loss-count", &[]);
            let mut worst = 0.0f64;
            let mut bad = 0;
            for _ in 0..trials {
                let n = rng.random_range(2..=20);
                let base = random_base(&mut rng, n, 5, 3);
                let k = rng.random_range(1..=n);
                let q: Vec<f64> = (0..5).map(|_| StandardNormal.sample(&mut rng)).collect();
                let label = rng.random_range(0..3);
                let loss =
                    prediction_loss(&q, label, &base, k, tau, 1e-9, None).unwrap_or(f64::NAN);
                let mut order: Vec<(f64, usize)> = (0..n)
                    .map(|m| {
                        let dist: f64 = q
                            .iter()
                            .zip(base.samples.row(m))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        (dist.sqrt(), m)
                    })
                    .collect();
                order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let count = order[..k]
                    .iter()
                    .filter(|(_, m)| base.labels[*m] != label)
                    .count() as f64;
                let err = (loss - count).abs();
                if !(err < 1e-2) {
                    bad += 1;
                }
                worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
            }
            (
                bad == 0,
                format!("max |loss - count| {worst:.1e}; {bad} trials out of tolerance"),
            )
        },
    )
}

/// Closed-form expected open gates vs Monte Carlo.
pub fn l0_identity(vectors: usize, draws: usize, root: u64) -> CheckResult {
    timed(
        "l0 surrogate identity",
        "relative error < 1%".into(),
        || {
            let mut rng = seed::stream(root, "l0-identity", &[]);
            let noise = NoiseSpec { sigma: 0.5 };
            let mut worst = 0.0f64;
            for _ in 0..vectors {
                let mu = Matrix::row_vector((0..20).map(|_| rng.random_range(-1.5..1.5)).collect());
                let analytic = expected_l0(&mu, noise.sigma);
                let mut open = 0usize;
                for _ in 0..draws {
                    let (s, _) = local_mask_train(&mu, &noise, &mut rng);
                    open += s.as_slice().iter().filter(|&&v| v > 0.0).count();
                }
                let mc = open as f64 / draws as f64;
                worst = worst.max((mc - analytic).abs() / analytic);
            }
            (worst < 0.01, format!("max rel err {:.3}%", 100.0 * worst))
        },
    )
}

/// Trains a small model on a synthetic split and compares hard and relaxed
/// rankings on its test queries.
pub fn hybrid_parity(root: u64, iterations: usize) -> CheckResult {
    timed(
        "hybrid sort parity",
        "100% agreement on queries without ties".into(),
        || {
            let run = || -> Result<String, String> {
                let (ds, _) =
                    gen_synthetic(SynKind::Syn1, 60, 40, 30, root).map_err(|e| e.to_string())?;
                let plan = make_splits(&ds, 5, 1, 0.1, root).map_err(|e| e.to_string())?;
                let s = prepare_split(&ds, &plan.runs[0]);
                let config = TrainConfig {
                    max_iterations: iterations,
                    hidden: 16,
                    batch_size: 32,
                    seed: root,
                    ..TrainConfig::default()
                };
                let out = train(&s.train, &s.val, &config).map_err(|e| e.to_string())?;
                let inf = infer(
                    &out.params,
                    &out.base,
                    &s.test.x,
                    config.k,
                    config.delta,
                    config.eps_zero,
                    1,
                )
                .map_err(|e| e.to_string())?;
                let masked = crate::model::mask_rows(&s.test.x, &inf.s_local);
                let r = hybrid_parity_check(&out.base, &masked, config.k, config.tau, config.delta)
                    .map_err(|e| e.to_string())?;
                if r.passed() {
                    Ok(format!(
                        "{}/{} agree, {} tied",
                        r.agreements,
                        r.queries,
                        r.ties.len()
                    ))
                } else {
                    Err(format!("{} mismatches", r.mismatches.len()))
                }
            };
            match run() {
                Ok(s) => (true, s),
                Err(e) => (false, e),
            }
        },
    )
}

/// Brute-force KNN: sort by distance (ties to the lower index), majority
/// vote with ties to the class of the nearest tied member.
pub fn brute_force_knn(query: &[f64], x: &Matrix, y: &[usize], k: usize) -> (usize, Vec<usize>) {
    let mut d: Vec<(f64, usize)> = (0..x.rows())
        .map(|m| {
            let s: f64 = query
                .iter()
                .zip(x.row(m))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (s, m)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nearest: Vec<usize> = d[..k].iter().map(|p| p.1).collect();
    let mut votes = std::collections::BTreeMap::new();
    for &m in &nearest {
        *votes.entry(y[m]).or_insert(0usize) += 1;
    }
    let top = *votes.values().max().unwrap_or(&0);
    let label = nearest
        .iter()
        .map(|&m| y[m])
        .find(|l| votes[l] == top)
        .unwrap_or(0);
    (label, nearest)
}

/// With masks that are identically one, predictions equal plain KNN.
pub fn knn_degeneracy(queries: usize, root: u64) -> CheckResult {
    timed(
        "knn degeneracy",
        "exact label and neighbour agreement".into(),
        || {
            let mut rng = seed::stream(root, "knn-oracle", &[]);
            let (n, d) = (120, 8);
            let base = random_base(&mut rng, n, d, 3);
            // zero weights with output bias 1 give mu = 1, hence s_local = 1
            let mut params = GatingParams::zeros(d, 4);
            params.b3 = Matrix::filled(1, d, 1.0);
            let q = Matrix::from_vec(
                queries,
                d,
                (0..queries * d)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect(),
            );
            let mut ks: Vec<usize> = (1..=7).collect();
            ks.shuffle(&mut rng);
            let mut agree = 0;
            for (i, &k) in ks.iter().cycle().take(queries).enumerate() {
                let inf = match infer(
                    &params,
                    &base,
                    &Matrix::row_vector(q.row(i).to_vec()),
                    k,
                    1e-9,
                    0.0,
                    1,
                ) {
                    Ok(v) => v,
                    Err(_) => continue,
                };
                let p = &inf.predictions[0];
                let (label, nearest) = brute_force_knn(q.row(i), &base.samples, &base.labels, k);
                let got: Vec<usize> = p.neighbors.iter().map(|nb| nb.position).collect();
                if p.label == label && got == nearest {
                    agree += 1;
                }
            }
            let direct = predict(q.row(0), &base, 1, SortMode::Hard, 1e-9, None).is_ok();
            (
                agree == queries && direct,
                format!("{agree}/{queries} agree"),
            )
        },
    )
}

/// Every check at the given sizes.
pub fn run_all(sizes: Sizes, root: u64) -> Vec<CheckResult> {
    vec![
        gradient_fidelity(sizes.grad_instances, root),
        relaxed_sort_limit(sizes.sort_trials, root),
        loss_count(sizes.loss_trials, root),
        l0_identity(sizes.l0_vectors, sizes.l0_draws, root),
        hybrid_parity(root, 300),
        knn_degeneracy(sizes.knn_queries, root),
    ]
}

/// Fixed-width report table.
pub fn format_table(results: &[CheckResult]) -> String {
    let mut out = format!(
        "{:<26} {:<6} {:>8}  {:<48} {}\n",
        "check", "result", "seconds", "tolerance", "observed"
    );
    for r in results {
        out.push_str(&format!(
            "{:<26} {:<6} {:>8.2}  {:<48} {}\n",
            r.name,
            if r.passed { "PASS" } else { "FAIL" },
            r.seconds,
            r.tolerance,
            r.observed
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::with_broken_tanh_adjoint;

    #[test]
    fn small_suite_passes() {
        let sizes = Sizes {
            grad_instances: 3,
            sort_trials: 30,
            loss_trials: 30,
            l0_vectors: 2,
            l0_draws: 20_000,
            knn_queries: 40,
        };
        for r in run_all(sizes, 1) {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn broken_adjoint_fails_gradient_check() {
        let r = with_broken_tanh_adjoint(|| gradient_fidelity(2, 1));
        assert!(!r.passed, "{r:?}");
    }

    #[test]
    fn brute_force_tie_rule() {
        let x = Matrix::from_rows(&[vec![1.0], vec![-1.0], vec![3.0]]);
        // two neighbours at equal distance, one vote each: the lower index wins
        assert_eq!(brute_force_knn(&[0.0], &x, &[1, 0, 0], 2), (1, vec![0, 1]));
    }
}
