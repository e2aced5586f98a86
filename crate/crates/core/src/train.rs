//! End-to-end training of the gating network against the nearest-prototype
//! loss, with proximal ℓ1 on the first layer and early stopping on a
//! validation loss.

use crate::data::Dataset;
use crate::diffcore::{DiffError, NodeId, Tape};
use crate::proto::{self, build_base, ProtoError, PrototypeBase};
use crate::seed;
use crate::selector::{
    expected_l0, forward_mu_batch, local_mask_infer, masked_inputs, prox_l1, GatingParams,
    NoiseSpec, ParamNodes, SelectorError, DEFAULT_EPS_ZERO,
};
use crate::tensor::Matrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// How the per-query prediction loss is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScale {
    /// Sum over the `K` relaxed rows.
    #[default]
    Sum,
    /// Sum divided by `K`.
    MeanOverK,
}

/// How batch gradients are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    /// Hand-derived reverse pass (fast).
    #[default]
    Fused,
    /// Generic reverse-mode tape.
    Tape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_global: f64,
    pub lambda_local: f64,
    pub k: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_iterations: usize,
    pub patience: usize,
    pub sigma: f64,
    pub tau: f64,
    pub delta: f64,
    pub seed: u64,
    pub hidden: usize,
    pub eval_every: usize,
    pub penalize_bias: bool,
    pub val_loss_pred_only: bool,
    pub loss_scale: LossScale,
    pub eps_zero: f64,
    pub engine: Engine,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_global: 1e-2,
            lambda_local: 0.0,
            k: 3,
            learning_rate: 0.1,
            weight_decay: 1e-4,
            batch_size: 64,
            max_iterations: 10_000,
            patience: 500,
            sigma: 0.5,
            tau: proto::DEFAULT_TAU,
            delta: proto::DEFAULT_DELTA,
            seed: 0,
            hidden: 100,
            eval_every: 1,
            penalize_bias: false,
            val_loss_pred_only: false,
            loss_scale: LossScale::Sum,
            eps_zero: DEFAULT_EPS_ZERO,
            engine: Engine::Fused,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |key: &str, why: String| {
            Err(TrainError::InvalidConfig {
                key: key.into(),
                reason: why,
            })
        };
        for (key, v) in [
            ("lambda_global", self.lambda_global),
            ("lambda_local", self.lambda_local),
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("delta", self.delta),
            ("eps_zero", self.eps_zero),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(
                    key,
                    format!("must be a finite non-negative number, got {v}"),
                );
            }
        }
        if !(self.sigma > 0.0) {
            return bad("sigma", format!("must be positive, got {}", self.sigma));
        }
        if !(self.tau > 0.0) {
            return bad("tau", format!("must be positive, got {}", self.tau));
        }
        if self.batch_size < 2 {
            return bad(
                "batch_size",
                format!("must be at least 2, got {}", self.batch_size),
            );
        }
        if self.k == 0 {
            return bad("k", "must be at least 1".into());
        }
        if self.k >= self.batch_size {
            return bad(
                "k",
                format!(
                    "must be smaller than batch_size ({} >= {})",
                    self.k, self.batch_size
                ),
            );
        }
        if self.hidden == 0 {
            return bad("hidden", "must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1".into());
        }
        Ok(())
    }

    pub(crate) fn pred_scale(&self) -> f64 {
        match self.loss_scale {
            LossScale::Sum => 1.0,
            LossScale::MeanOverK => 1.0 / self.k as f64,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },
    #[error("data: {0}")]
    Data(String),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error(
        "non-finite loss at iteration {iteration}, batch {batch}: \
         pred={pred_loss}, local={local_reg}, l1={l1_norm}"
    )]
    NumericalFailure {
        iteration: usize,
        batch: usize,
        pred_loss: f64,
        local_reg: f64,
        l1_norm: f64,
    },
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub train_loss: f64,
    /// `None` when validation was not evaluated after this step.
    pub val_loss: Option<f64>,
    pub mean_l0: f64,
    pub l1_norm: f64,
}

pub const HISTORY_HEADER: &str = "iter,train_loss,val_loss,mean_l0,l1_norm";

pub fn write_history(rows: &[HistoryRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    for r in rows {
        let val = r.val_loss.map(|v| format!("{v:e}")).unwrap_or_default();
        writeln!(
            w,
            "{},{:e},{},{:e},{:e}",
            r.iter, r.train_loss, val, r.mean_l0, r.l1_norm
        )?;
    }
    Ok(())
}

/// Mutable state of a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: GatingParams,
    pub iteration: usize,
    pub best_val_loss: f64,
    pub best_params: GatingParams,
    /// Step count at which `best_params` was captured (0 = initialisation).
    pub best_iteration: usize,
    /// Evaluations since the last improvement.
    pub stale: usize,
}

impl TrainState {
    fn observe(&mut self, val: f64) {
        if val < self.best_val_loss {
            self.best_val_loss = val;
            self.best_params = self.params.clone();
            self.best_iteration = self.iteration;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: GatingParams,
    /// Full training set under deterministic masks; `sources` index rows of
    /// the training dataset.
    pub base: PrototypeBase,
    pub history: Vec<HistoryRow>,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub best_iteration: usize,
    pub iterations_run: usize,
    pub stopped_early: bool,
}

/// Loss pieces of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub pred: f64,
    pub local: f64,
    pub mean_l0: f64,
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        self.pred + self.local
    }
}

/// `w ← w − α (g + weight_decay · w)` on every tensor.
pub fn sgd_step(params: &mut GatingParams, grads: &GatingParams, alpha: f64, weight_decay: f64) {
    for (w, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        assert_eq!(w.shape(), g.shape(), "gradient shape");
        for (wi, &gi) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
            *wi -= alpha * (gi + weight_decay * *wi);
        }
    }
}

/// Value, components and gradients of the batch objective with the engine
/// chosen in `config`.
pub fn batch_objective(
    params: &GatingParams,
    xb: &Matrix,
    yb: &[usize],
    eps: &Matrix,
    config: &TrainConfig,
) -> Result<(StepLoss, GatingParams)> {
    match config.engine {
        Engine::Fused => crate::fused::batch_objective_fused(params, xb, yb, eps, config),
        Engine::Tape => batch_objective_tape(params, xb, yb, eps, config),
    }
}

/// Tape recording of the batch objective.
pub struct RecordedObjective {
    pub tape: Tape,
    pub params: ParamNodes,
    pub pred: NodeId,
    pub local: Option<NodeId>,
    pub mask: NodeId,
}

/// Records the training objective of one batch (prediction loss plus the
/// local ℓ0 surrogate) on a fresh tape whose root is the objective. The ℓ1
/// term is left to the proximal step.
pub fn record_objective(
    params: &GatingParams,
    xb: &Matrix,
    yb: &[usize],
    eps: &Matrix,
    config: &TrainConfig,
) -> Result<RecordedObjective> {
    let s_global = params.global_mask(config.eps_zero);
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(&mut tape, params);
    let xm = tape.constant(masked_inputs(xb, &s_global));
    let mu = nodes.mu(&mut tape, xm);
    let noise = tape.constant(eps.clone());
    let z = tape.add(mu, noise);
    let s = tape.hard_clamp(z);
    let x = tape.constant(xb.clone());
    let masked = tape.mul(s, x);
    let pred = proto::record_batch_loss(&mut tape, masked, yb, config.k, config.tau, config.delta)?;
    let pred = tape.scale(pred, config.pred_scale());
    let mut root = pred;
    let mut local = None;
    if config.lambda_local > 0.0 {
        let q = tape.gaussian_tail(mu, config.sigma);
        let q = tape.sum(q);
        let r = tape.scale(q, config.lambda_local / yb.len() as f64);
        root = tape.add(pred, r);
        local = Some(r);
    }
    tape.set_root(root);
    Ok(RecordedObjective {
        tape,
        params: nodes,
        pred,
        local,
        mask: s,
    })
}

/// [`record_objective`] followed by a forward and reverse pass.
pub fn batch_objective_tape(
    params: &GatingParams,
    xb: &Matrix,
    yb: &[usize],
    eps: &Matrix,
    config: &TrainConfig,
) -> Result<(StepLoss, GatingParams)> {
    let mut rec = record_objective(params, xb, yb, eps, config)?;
    rec.tape.forward()?;
    let tape = &rec.tape;
    let value = |id| tape.value(id).map(|m: &Matrix| m.get(0, 0)).unwrap_or(0.0);
    let s_val = tape.value(rec.mask).expect("forwarded");
    let open = s_val.as_slice().iter().filter(|&&v| v > 0.0).count();
    let loss = StepLoss {
        pred: value(rec.pred),
        local: rec.local.map(value).unwrap_or(0.0),
        mean_l0: open as f64 / yb.len() as f64,
    };
    if !loss.total().is_finite() {
        return Ok((
            loss,
            GatingParams::zeros(params.features(), params.hidden()),
        ));
    }
    let grads = rec.tape.backward()?;
    Ok((loss, rec.params.collect(&grads)))
}

/// Deterministic masks for every row of `x`: `(s_global, mu, s_local)`.
pub fn infer_masks(
    params: &GatingParams,
    x: &Matrix,
    eps_zero: f64,
) -> Result<(Vec<f64>, Matrix, Matrix)> {
    let g = params.global_mask(eps_zero);
    let mu = forward_mu_batch(params, x, &g)?;
    let s = local_mask_infer(&mu);
    Ok((g, mu, s))
}

fn apply_mask(x: &Matrix, s: &Matrix) -> Matrix {
    let data = x
        .as_slice()
        .iter()
        .zip(s.as_slice())
        .map(|(a, b)| a * b)
        .collect();
    Matrix::from_vec(x.rows(), x.cols(), data)
}

/// Prototype base of `x` under deterministic masks.
pub fn inference_base(
    params: &GatingParams,
    x: &Matrix,
    labels: &[usize],
    sources: Vec<usize>,
    eps_zero: f64,
) -> Result<PrototypeBase> {
    let (_, _, s) = infer_masks(params, x, eps_zero)?;
    Ok(build_base(apply_mask(x, &s), labels.to_vec(), sources)?)
}

/// Deterministic-mask loss of `val` against the full masked training set.
/// When `val` is the training set itself each query leaves its own
/// prototype out, as during training.
pub fn validation_loss(
    params: &GatingParams,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
) -> Result<f64> {
    if val.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let base = inference_base(
        params,
        &train.x,
        &train.y,
        (0..train.len()).collect(),
        config.eps_zero,
    )?;
    let (_, mu, s) = infer_masks(params, &val.x, config.eps_zero)?;
    let queries = apply_mask(&val.x, &s);
    let same = std::ptr::eq(train, val) || (train.x == val.x && train.y == val.y);
    let mut pred = 0.0;
    for i in 0..val.len() {
        let exclude = same.then_some(i);
        pred += proto::prediction_loss(
            queries.row(i),
            val.y[i],
            &base,
            config.k,
            config.tau,
            config.delta,
            exclude,
        )?;
    }
    let mut loss = config.pred_scale() * pred / val.len() as f64;
    if !config.val_loss_pred_only {
        loss += config.lambda_local * expected_l0(&mu, config.sigma);
        loss += config.lambda_global * params.first_layer_l1(config.penalize_bias);
    }
    Ok(loss)
}

fn check_compatible(train: &Dataset, val: &Dataset) -> Result<()> {
    if train.is_empty() {
        return Err(TrainError::Data("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    if train.features() != val.features() {
        return Err(TrainError::Data(format!(
            "training has {} features, validation {}",
            train.features(),
            val.features()
        )));
    }
    if train.class_count != val.class_count {
        return Err(TrainError::Data(
            "training and validation class sets differ".into(),
        ));
    }
    Ok(())
}

/// Batches of one epoch: shuffled, last partial batch dropped unless the
/// whole set is smaller than a batch.
fn epoch_batches(n: usize, batch: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    if n <= batch {
        return vec![idx];
    }
    idx.chunks_exact(batch).map(|c| c.to_vec()).collect()
}

pub fn train(train_set: &Dataset, val_set: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    check_compatible(train_set, val_set)?;
    let effective_batch = config.batch_size.min(train_set.len());
    if config.k >= effective_batch {
        return Err(TrainError::InvalidConfig {
            key: "k".into(),
            reason: format!(
                "needs more than k={} training samples per batch, got {effective_batch}",
                config.k
            ),
        });
    }

    let mut init_rng = seed::stream(config.seed, "init", &[]);
    let mut noise_rng = seed::stream(config.seed, "noise", &[]);
    let noise = NoiseSpec {
        sigma: config.sigma,
    };
    let params = GatingParams::init(train_set.features(), config.hidden, &mut init_rng);
    let initial_val_loss = validation_loss(&params, train_set, val_set, config)?;
    let mut state = TrainState {
        best_params: params.clone(),
        params,
        iteration: 0,
        best_val_loss: initial_val_loss,
        best_iteration: 0,
        stale: 0,
    };

    let mut history = Vec::with_capacity(config.max_iterations.min(1 << 16));
    let mut epoch = 0u64;
    let mut batches = Vec::new().into_iter();
    let mut batch_id = 0usize;
    let mut stopped_early = false;
    while state.iteration < config.max_iterations {
        let batch = match batches.next() {
            Some(b) => {
                batch_id += 1;
                b
            }
            None => {
                batch_id = 0;
                let mut rng = seed::stream(config.seed, "shuffle", &[epoch]);
                batches = epoch_batches(train_set.len(), config.batch_size, &mut rng).into_iter();
                epoch += 1;
                continue;
            }
        };
        let xb = train_set.x.select_rows(&batch);
        let yb: Vec<usize> = batch.iter().map(|&i| train_set.y[i]).collect();
        let eps = noise.sample(xb.rows(), xb.cols(), &mut noise_rng);
        let (loss, grads) = batch_objective(&state.params, &xb, &yb, &eps, config)?;
        let l1 = state.params.first_layer_l1(config.penalize_bias);
        if !loss.total().is_finite() {
            return Err(TrainError::NumericalFailure {
                iteration: state.iteration,
                batch: batch_id - 1,
                pred_loss: loss.pred,
                local_reg: loss.local,
                l1_norm: l1,
            });
        }
        sgd_step(
            &mut state.params,
            &grads,
            config.learning_rate,
            config.weight_decay,
        );
        prox_l1(
            &mut state.params,
            config.lambda_global,
            config.learning_rate,
            config.penalize_bias,
        );
        state.iteration += 1;

        let mut row = HistoryRow {
            iter: state.iteration - 1,
            train_loss: loss.total() + config.lambda_global * l1,
            val_loss: None,
            mean_l0: loss.mean_l0,
            l1_norm: l1,
        };
        if state.iteration % config.eval_every == 0 {
            let v = validation_loss(&state.params, train_set, val_set, config)?;
            if !v.is_finite() {
                return Err(TrainError::NumericalFailure {
                    iteration: state.iteration,
                    batch: usize::MAX,
                    pred_loss: v,
                    local_reg: f64::NAN,
                    l1_norm: state.params.first_layer_l1(config.penalize_bias),
                });
            }
            row.val_loss = Some(v);
            state.observe(v);
        }
        history.push(row);
        if state.stale >= config.patience.max(1) {
            stopped_early = true;
            break;
        }
    }

    let base = inference_base(
        &state.best_params,
        &train_set.x,
        &train_set.y,
        (0..train_set.len()).collect(),
        config.eps_zero,
    )?;
    Ok(TrainOutcome {
        params: state.best_params,
        base,
        history,
        initial_val_loss,
        best_val_loss: state.best_val_loss,
        best_iteration: state.best_iteration,
        iterations_run: state.iteration,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blobs(n: usize, d: usize, seed: u64) -> Dataset {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut data = Vec::with_capacity(n * d);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % 2;
            for j in 0..d {
                let centre = if j == 0 {
                    3.0 * (2.0 * c as f64 - 1.0)
                } else {
                    0.0
                };
                data.push(centre + noise.sample(&mut rng));
            }
            y.push(c);
        }
        Dataset {
            x: Matrix::from_vec(n, d, data),
            y,
            class_count: 2,
            feature_names: (0..d).map(|j| format!("f{j}")).collect(),
            label_names: vec!["a".into(), "b".into()],
            ground_truth: None,
        }
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut p = GatingParams::zeros(2, 1);
        p.w1.set(0, 0, 1.0);
        let before = p.clone();
        sgd_step(&mut p, &GatingParams::zeros(2, 1), 0.1, 0.0);
        assert_eq!(p, before);
        sgd_step(&mut p, &GatingParams::zeros(2, 1), 0.1, 1e-4);
        assert!((p.w1.get(0, 0) - 0.99999).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_column_reaches_exact_zero() {
        let mut p = GatingParams::zeros(3, 2);
        p.w1.set(0, 1, 0.8);
        p.w1.set(1, 1, -0.3);
        let g = GatingParams::zeros(3, 2);
        let mut steps = 0;
        while p.global_mask(0.0)[1] != 0.0 {
            sgd_step(&mut p, &g, 0.1, 1e-4);
            prox_l1(&mut p, 1e-2, 0.1, false);
            steps += 1;
            assert!(steps < 1000, "column never vanished");
        }
        // soft-thresholding by 1e-3 per step removes 0.8 within about 800 steps
        assert!(steps <= 800);
        assert_eq!(p.w1.column(1), vec![0.0, 0.0]);
    }

    #[test]
    fn observe_needs_strict_improvement() {
        let p = GatingParams::zeros(2, 1);
        let mut st = TrainState {
            params: p.clone(),
            iteration: 3,
            best_val_loss: 1.0,
            best_params: p,
            best_iteration: 0,
            stale: 0,
        };
        st.observe(1.0);
        assert_eq!((st.stale, st.best_iteration), (1, 0));
        st.observe(0.5);
        assert_eq!((st.stale, st.best_iteration, st.best_val_loss), (0, 3, 0.5));
    }

    #[test]
    fn config_validation_names_the_key() {
        let bad = TrainConfig {
            k: 64,
            ..TrainConfig::default()
        };
        match bad.validate() {
            Err(TrainError::InvalidConfig { key, .. }) => assert_eq!(key, "k"),
            other => panic!("{other:?}"),
        }
        let json = r#"{"lambda_global": 0.02, "unknown": 1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
        let c: TrainConfig = serde_json::from_str(r#"{"k": 5}"#).unwrap();
        assert_eq!((c.k, c.batch_size, c.patience), (5, 64, 500));
    }

    #[test]
    fn validation_on_training_set_matches_noiseless_objective() {
        let ds = blobs(24, 4, 1);
        let config = TrainConfig {
            lambda_global: 0.0,
            lambda_local: 0.05,
            hidden: 5,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let params = GatingParams::init(4, 5, &mut ChaCha8Rng::seed_from_u64(2));
        let v = validation_loss(&params, &ds, &ds, &config).unwrap();
        let (loss, _) =
            batch_objective(&params, &ds.x, &ds.y, &Matrix::zeros(24, 4), &config).unwrap();
        assert!((v - loss.total()).abs() < 1e-10, "{v} vs {}", loss.total());
        assert_eq!(v, validation_loss(&params, &ds, &ds, &config).unwrap());

        let empty = ds.subset(&[]);
        assert!(matches!(
            validation_loss(&params, &ds, &empty, &config),
            Err(TrainError::EmptyValidation)
        ));
    }

    #[test]
    fn epoch_batches_drop_the_remainder() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(10, 4, &mut rng);
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|c| c.len() == 4));
        assert_eq!(epoch_batches(3, 4, &mut rng)[0].len(), 3);
    }

    #[test]
    fn history_csv_has_header_and_blank_val() {
        let rows = [HistoryRow {
            iter: 0,
            train_loss: 1.5,
            val_loss: None,
            mean_l0: 2.0,
            l1_norm: 0.25,
        }];
        let mut buf = Vec::new();
        write_history(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(HISTORY_HEADER));
        assert_eq!(text.lines().nth(1), Some("0,1.5e0,,2e0,2.5e-1"));
    }
}
