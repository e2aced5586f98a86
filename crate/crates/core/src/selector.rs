//! Global-to-local feature selector: a three-layer tanh gating network whose
//! first-layer weights carry the global mask and whose output, clamped to
//! `[0, 1]`, is the per-sample local mask.

use crate::diffcore::{gaussian_tail, hard_clamp, NodeId, Tape};
use crate::tensor::{gemm, Matrix};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.1;

/// Default tolerance below which a first-layer column counts as zero.
pub const DEFAULT_EPS_ZERO: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SelectorError {
    #[error("sample has {got} features, selector expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Weights of the gating network.
///
/// `w1` is `hidden × D`, `w2` is `hidden × hidden`, `w3` is `D × hidden`;
/// biases are row vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w3: Matrix,
    pub b3: Matrix,
}

pub const LAYER_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

impl GatingParams {
    /// Gaussian `N(0, 0.1²)` weights and zero biases, deterministic in `seed`.
    pub fn init(features: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        assert!(
            features >= 1 && hidden >= 1,
            "selector needs D >= 1 and hidden >= 1"
        );
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| normal.sample(rng)).collect())
        };
        let w1 = draw(hidden, features);
        let w2 = draw(hidden, hidden);
        let w3 = draw(features, hidden);
        Self {
            w1,
            b1: Matrix::zeros(1, hidden),
            w2,
            b2: Matrix::zeros(1, hidden),
            w3,
            b3: Matrix::zeros(1, features),
        }
    }

    pub fn zeros(features: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, features),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, hidden),
            b2: Matrix::zeros(1, hidden),
            w3: Matrix::zeros(features, hidden),
            b3: Matrix::zeros(1, features),
        }
    }

    pub fn features(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn tensors(&self) -> [&Matrix; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// `||W1||_1`, optionally including the first-layer bias.
    pub fn first_layer_l1(&self, include_bias: bool) -> f64 {
        let mut s = self.w1.l1_norm();
        if include_bias {
            s += self.b1.l1_norm();
        }
        s
    }

    /// Binary global mask: feature `d` is dropped iff every weight leaving
    /// input `d` has magnitude at most `eps_zero`.
    pub fn global_mask(&self, eps_zero: f64) -> Vec<f64> {
        global_mask(self, eps_zero)
    }

    /// Deterministic `mu` for each row of `x` (`N × D`).
    pub fn forward_mu_batch(&self, x: &Matrix, s_global: &[f64]) -> Result<Matrix, SelectorError> {
        forward_mu_batch(self, x, s_global)
    }
}

/// See [`GatingParams::global_mask`].
pub fn global_mask(params: &GatingParams, eps_zero: f64) -> Vec<f64> {
    let w1 = &params.w1;
    (0..w1.cols())
        .map(|d| {
            let max = (0..w1.rows())
                .map(|h| w1.get(h, d).abs())
                .fold(0.0, f64::max);
            if max <= eps_zero {
                0.0
            } else {
                1.0
            }
        })
        .collect()
}

/// `x ⊙ s_global` applied to every row.
pub fn masked_inputs(x: &Matrix, s_global: &[f64]) -> Matrix {
    let mut xm = x.clone();
    for r in 0..xm.rows() {
        for (v, &m) in xm.row_mut(r).iter_mut().zip(s_global) {
            *v *= m;
        }
    }
    xm
}

fn dense_layer(input: &Matrix, w: &Matrix, b: &Matrix, tanh: bool) -> Matrix {
    let mut out = Matrix::zeros(input.rows(), w.rows());
    gemm(input, false, w, true, &mut out, 0.0);
    let bias = b.as_slice();
    for r in 0..out.rows() {
        for (o, &bi) in out.row_mut(r).iter_mut().zip(bias) {
            *o += bi;
            if tanh {
                *o = o.tanh();
            }
        }
    }
    out
}

/// `mu = W3 tanh(W2 tanh(W1 (x ⊙ s_global) + b1) + b2) + b3`, row-wise.
pub fn forward_mu_batch(
    params: &GatingParams,
    x: &Matrix,
    s_global: &[f64],
) -> Result<Matrix, SelectorError> {
    let d = params.features();
    if x.cols() != d {
        return Err(SelectorError::DimensionMismatch {
            expected: d,
            got: x.cols(),
        });
    }
    if s_global.len() != d {
        return Err(SelectorError::DimensionMismatch {
            expected: d,
            got: s_global.len(),
        });
    }
    let xm = masked_inputs(x, s_global);
    let h1 = dense_layer(&xm, &params.w1, &params.b1, true);
    let h2 = dense_layer(&h1, &params.w2, &params.b2, true);
    Ok(dense_layer(&h2, &params.w3, &params.b3, false))
}

/// Single-sample [`forward_mu_batch`].
pub fn forward_mu(
    params: &GatingParams,
    x: &[f64],
    s_global: &[f64],
) -> Result<Vec<f64>, SelectorError> {
    let m = Matrix::row_vector(x.to_vec());
    Ok(forward_mu_batch(params, &m, s_global)?.into_vec())
}

/// Noise configuration for training-time local masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { sigma: 0.5 }
    }
}

impl NoiseSpec {
    /// i.i.d. `N(0, sigma²)` noise of the given shape.
    pub fn sample(&self, rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        assert!(self.sigma > 0.0, "training noise needs sigma > 0");
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                self.sigma * z
            })
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

/// `max(0, min(1, mu + eps))` with freshly drawn noise. Returns the mask and
/// the noise that produced it.
pub fn local_mask_train(mu: &Matrix, noise: &NoiseSpec, rng: &mut impl Rng) -> (Matrix, Matrix) {
    let eps = noise.sample(mu.rows(), mu.cols(), rng);
    let data = mu
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(&m, &e)| hard_clamp(m + e))
        .collect();
    (Matrix::from_vec(mu.rows(), mu.cols(), data), eps)
}

/// Deterministic inference mask `max(0, min(1, mu))`.
pub fn local_mask_infer(mu: &Matrix) -> Matrix {
    mu.map(hard_clamp)
}

/// Values of the two sparsity terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SparsityTerms {
    /// `lambda_global * ||W1||_1`; handled by the proximal step, reported only.
    pub global: f64,
    /// `lambda_local * mean_i sum_d Q(-mu_d / sigma)`.
    pub local: f64,
}

impl SparsityTerms {
    pub fn total(&self) -> f64 {
        self.global + self.local
    }
}

/// Expected number of open gates summed over features, averaged over rows.
pub fn expected_l0(mu_batch: &Matrix, sigma: f64) -> f64 {
    if mu_batch.rows() == 0 {
        return 0.0;
    }
    let total: f64 = mu_batch
        .as_slice()
        .iter()
        .map(|&m| gaussian_tail(m, sigma))
        .sum();
    total / mu_batch.rows() as f64
}

pub fn sparsity_regulariser(
    params: &GatingParams,
    mu_batch: &Matrix,
    lambda_global: f64,
    lambda_local: f64,
    sigma: f64,
    penalize_bias: bool,
) -> SparsityTerms {
    SparsityTerms {
        global: lambda_global * params.first_layer_l1(penalize_bias),
        local: lambda_local * expected_l0(mu_batch, sigma),
    }
}

#[inline]
fn soft_threshold(w: f64, t: f64) -> f64 {
    let m = w.abs() - t;
    if m > 0.0 {
        w.signum() * m
    } else {
        0.0
    }
}

/// Soft-thresholds every first-layer weight by `alpha * lambda_global`.
pub fn prox_l1(params: &mut GatingParams, lambda_global: f64, alpha: f64, penalize_bias: bool) {
    if lambda_global == 0.0 {
        return;
    }
    let t = alpha * lambda_global;
    for w in params.w1.as_mut_slice() {
        *w = soft_threshold(*w, t);
    }
    if penalize_bias {
        for w in params.b1.as_mut_slice() {
            *w = soft_threshold(*w, t);
        }
    }
}

/// Parameter nodes of a selector recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ParamNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
}

impl ParamNodes {
    pub fn register(tape: &mut Tape, params: &GatingParams) -> Self {
        Self {
            w1: tape.param(params.w1.clone()),
            b1: tape.param(params.b1.clone()),
            w2: tape.param(params.w2.clone()),
            b2: tape.param(params.b2.clone()),
            w3: tape.param(params.w3.clone()),
            b3: tape.param(params.b3.clone()),
        }
    }

    pub fn all(&self) -> [NodeId; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }

    /// Records `mu` for every row of the (already globally masked) input node.
    pub fn mu(&self, tape: &mut Tape, x_masked: NodeId) -> NodeId {
        let w1t = tape.transpose(self.w1);
        let z1 = tape.matmul(x_masked, w1t);
        let z1 = tape.add(z1, self.b1);
        let h1 = tape.tanh(z1);
        let w2t = tape.transpose(self.w2);
        let z2 = tape.matmul(h1, w2t);
        let z2 = tape.add(z2, self.b2);
        let h2 = tape.tanh(z2);
        let w3t = tape.transpose(self.w3);
        let z3 = tape.matmul(h2, w3t);
        tape.add(z3, self.b3)
    }

    /// Collects the gradients for these nodes back into selector layout.
    pub fn collect(&self, grads: &crate::diffcore::Gradients) -> GatingParams {
        let get = |id| {
            grads
                .get(id)
                .cloned()
                .expect("gradient for selector parameter")
        };
        GatingParams {
            w1: get(self.w1),
            b1: get(self.b1),
            w2: get(self.w2),
            b2: get(self.b2),
            w3: get(self.w3),
            b3: get(self.b3),
        }
    }
}

/// Feature behaviour under the combined global and local masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskTag {
    BothSelected,
    LocallyDropped,
    LocallyRecovered,
    BothDropped,
}

pub fn mask_tag(global: f64, local: f64) -> MaskTag {
    match (global > 0.0, local > 0.0) {
        (true, true) => MaskTag::BothSelected,
        (true, false) => MaskTag::LocallyDropped,
        (false, true) => MaskTag::LocallyRecovered,
        (false, false) => MaskTag::BothDropped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = GatingParams::init(5, 3, &mut rng(1));
        let b = GatingParams::init(5, 3, &mut rng(1));
        assert_eq!(a, b);
        assert_eq!(a.w1.shape(), (3, 5));
        assert_eq!(a.w3.shape(), (5, 3));
        assert_eq!(a.b3.shape(), (1, 5));
        assert!(a.b1.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn init_mean_is_near_zero() {
        // 10^6 weights: 1000 x 1000 first layer.
        let p = GatingParams::init(1000, 1000, &mut rng(5));
        let mean = p.w1.sum() / p.w1.len() as f64;
        assert!(mean.abs() < 3.0 * INIT_STD / 1e3, "mean {mean}");
    }

    #[test]
    fn zero_column_drops_feature() {
        let mut p = GatingParams::init(4, 3, &mut rng(2));
        assert_eq!(p.global_mask(DEFAULT_EPS_ZERO), vec![1.0; 4]);
        for h in 0..3 {
            p.w1.set(h, 2, 0.0);
        }
        assert_eq!(p.global_mask(DEFAULT_EPS_ZERO), vec![1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let p = GatingParams::zeros(4, 3);
        let mu = forward_mu(&p, &[1.0, 2.0, 3.0, 4.0], &[1.0; 4]).unwrap();
        assert_eq!(mu, vec![0.0; 4]);
    }

    #[test]
    fn masked_input_is_ignored() {
        let p = GatingParams::init(4, 6, &mut rng(3));
        let g = [1.0, 0.0, 1.0, 1.0];
        let a = forward_mu(&p, &[0.5, 1.0, -0.3, 0.2], &g).unwrap();
        let b = forward_mu(&p, &[0.5, -7.0, -0.3, 0.2], &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = GatingParams::zeros(4, 3);
        assert_eq!(
            forward_mu(&p, &[1.0, 2.0], &[1.0; 4]).unwrap_err(),
            SelectorError::DimensionMismatch {
                expected: 4,
                got: 2
            }
        );
    }

    /// Independent dense evaluation with explicit loops.
    fn oracle_mu(p: &GatingParams, x: &[f64], g: &[f64]) -> Vec<f64> {
        let layer = |inp: &[f64], w: &Matrix, b: &Matrix, act: bool| -> Vec<f64> {
            (0..w.rows())
                .map(|o| {
                    let mut s = b.get(0, o);
                    for (i, &xi) in inp.iter().enumerate() {
                        s += w.get(o, i) * xi;
                    }
                    if act {
                        s.tanh()
                    } else {
                        s
                    }
                })
                .collect()
        };
        let xm: Vec<f64> = x.iter().zip(g).map(|(a, b)| a * b).collect();
        let h1 = layer(&xm, &p.w1, &p.b1, true);
        let h2 = layer(&h1, &p.w2, &p.b2, true);
        layer(&h2, &p.w3, &p.b3, false)
    }

    #[test]
    fn mu_matches_dense_oracle_and_tape() {
        let mut r = rng(4);
        let mut p = GatingParams::init(7, 5, &mut r);
        for b in [&mut p.b1, &mut p.b2, &mut p.b3] {
            for v in b.as_mut_slice() {
                *v = r.random_range(-0.5..0.5);
            }
        }
        let x = Matrix::from_vec(3, 7, (0..21).map(|_| r.random_range(-2.0..2.0)).collect());
        let g = vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let batch = forward_mu_batch(&p, &x, &g).unwrap();

        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, &p);
        let xm = tape.constant(masked_inputs(&x, &g));
        let mu = nodes.mu(&mut tape, xm);
        let s = tape.sum(mu);
        tape.set_root(s);
        tape.forward().unwrap();
        let tape_mu = tape.value(mu).unwrap();

        for i in 0..3 {
            let o = oracle_mu(&p, x.row(i), &g);
            for d in 0..7 {
                assert!((batch.get(i, d) - o[d]).abs() < 1e-12);
                assert!((tape_mu.get(i, d) - o[d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inference_mask_is_clamp() {
        let mu = Matrix::row_vector(vec![-1.0, 0.3, 2.0]);
        assert_eq!(local_mask_infer(&mu).as_slice(), &[0.0, 0.3, 1.0]);
        assert_eq!(local_mask_infer(&Matrix::zeros(1, 4)).as_slice(), &[0.0; 4]);
    }

    #[test]
    fn saturated_training_masks() {
        let mu = Matrix::row_vector(vec![10.0, -10.0]);
        let noise = NoiseSpec::default();
        let mut r = rng(9);
        for _ in 0..1000 {
            let (s, _) = local_mask_train(&mu, &noise, &mut r);
            assert_eq!(s.as_slice(), &[1.0, 0.0]);
        }
    }

    #[test]
    fn open_gate_probability_at_zero_mean() {
        let mu = Matrix::zeros(1, 1);
        let noise = NoiseSpec::default();
        let mut r = rng(10);
        let draws = 100_000;
        let open = (0..draws)
            .filter(|_| local_mask_train(&mu, &noise, &mut r).0.get(0, 0) > 0.0)
            .count();
        let p = open as f64 / draws as f64;
        assert!((p - 0.5).abs() < 0.005, "p={p}");
    }

    #[test]
    fn regulariser_values() {
        let p = GatingParams::zeros(10, 2);
        let mu = Matrix::zeros(1, 10);
        let t = sparsity_regulariser(&p, &mu, 0.0, 1.0, 0.5, false);
        assert!((t.local - 5.0).abs() < 1e-15);

        let mut p = GatingParams::zeros(7, 2);
        for (i, w) in p.w1.as_mut_slice().iter_mut().enumerate() {
            *w = if i % 2 == 0 { 0.5 } else { -0.5 };
        }
        let t = sparsity_regulariser(&p, &Matrix::zeros(1, 7), 1.0, 0.0, 0.5, false);
        assert!((t.global - 7.0).abs() < 1e-15);
    }

    #[test]
    fn expected_l0_matches_monte_carlo() {
        let mut r = rng(12);
        let mu = Matrix::row_vector((0..10).map(|_| r.random_range(-1.0..1.0)).collect());
        let noise = NoiseSpec::default();
        let draws = 100_000;
        let mut open = 0usize;
        for _ in 0..draws {
            let (s, _) = local_mask_train(&mu, &noise, &mut r);
            open += s.as_slice().iter().filter(|&&v| v > 0.0).count();
        }
        let mc = open as f64 / draws as f64;
        let analytic = expected_l0(&mu, 0.5);
        assert!(
            (mc - analytic).abs() / analytic < 0.01,
            "mc={mc} analytic={analytic}"
        );
    }

    #[test]
    fn prox_shrinks_and_zeroes() {
        let mut p = GatingParams::zeros(2, 1);
        p.w1 = Matrix::row_vector(vec![0.05, -0.3]);
        prox_l1(&mut p, 1.0, 0.1, false);
        assert_eq!(p.w1.get(0, 0), 0.0);
        assert!((p.w1.get(0, 1) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn prox_with_zero_lambda_is_identity() {
        let mut p = GatingParams::init(6, 4, &mut rng(3));
        let before = p.clone();
        prox_l1(&mut p, 0.0, 0.1, true);
        assert_eq!(p, before);
    }

    #[test]
    fn prox_leaves_other_layers() {
        let mut p = GatingParams::init(6, 4, &mut rng(3));
        let before = p.clone();
        prox_l1(&mut p, 10.0, 1.0, false);
        assert!(p.w1.as_slice().iter().all(|&w| w == 0.0));
        assert_eq!(p.w2, before.w2);
        assert_eq!(p.b1, before.b1);
        assert_eq!(p.global_mask(DEFAULT_EPS_ZERO), vec![0.0; 6]);
    }

    #[test]
    fn mask_taxonomy() {
        assert_eq!(mask_tag(1.0, 0.4), MaskTag::BothSelected);
        assert_eq!(mask_tag(1.0, 0.0), MaskTag::LocallyDropped);
        assert_eq!(mask_tag(0.0, 0.2), MaskTag::LocallyRecovered);
        assert_eq!(mask_tag(0.0, 0.0), MaskTag::BothDropped);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn prox_is_idempotent_on_its_fixed_points(
                ws in proptest::collection::vec(-1.0f64..1.0, 1..20),
                t in 0.0f64..0.5,
            ) {
                let mut p = GatingParams::zeros(ws.len(), 1);
                p.w1 = Matrix::row_vector(ws);
                prox_l1(&mut p, t, 1.0, false);
                let once = p.clone();
                // zero entries stay zero, survivors shrink by exactly t again
                prox_l1(&mut p, t, 1.0, false);
                for (a, b) in once.w1.as_slice().iter().zip(p.w1.as_slice()) {
                    if *a == 0.0 {
                        prop_assert_eq!(*b, 0.0);
                    } else {
                        prop_assert!((b - soft_threshold(*a, t)).abs() < 1e-15);
                    }
                }
            }

            #[test]
            fn gate_probability_increases_with_mu(a in -3.0f64..3.0, d in 1e-3f64..1.0) {
                prop_assert!(gaussian_tail(a + d, 0.5) > gaussian_tail(a, 0.5));
            }
        }
    }
}
