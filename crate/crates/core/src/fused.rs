//! Hand-derived forward and reverse pass of the batch training objective.
//!
//! Computes the same quantity as the tape recording in
//! [`crate::train::batch_objective_tape`] without building a graph; the
//! tests pin the two against each other.

use crate::diffcore::{gaussian_pdf, gaussian_tail};
use crate::proto::ProtoError;
use crate::selector::{masked_inputs, GatingParams};
use crate::tensor::{gemm, Matrix};
use crate::train::{Result, StepLoss, TrainConfig};
use std::cmp::Ordering;

fn dense_tanh(input: &Matrix, w: &Matrix, b: &Matrix, tanh: bool) -> Matrix {
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

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, &v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    Matrix::row_vector(out)
}

/// Ascending order of `v`, grouped into runs of equal values.
fn tie_groups(v: &[f64]) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap_or(Ordering::Equal));
    let mut groups = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        groups.push((start, end));
        start = end;
    }
    (order, groups)
}

/// `sum_m |v_n - v_m|` for every `n`, in `O(M log M)`.
pub fn abs_diff_sums_sorted(v: &[f64]) -> Vec<f64> {
    let (order, groups) = tie_groups(v);
    let total: f64 = v.iter().sum();
    let m = v.len() as f64;
    let mut out = vec![0.0; v.len()];
    let mut below_sum = 0.0;
    for &(s, e) in &groups {
        let val = v[order[s]];
        let c = (e - s) as f64;
        let below = s as f64;
        let above = m - below - c;
        let above_sum = total - below_sum - c * val;
        let a = val * below - below_sum + above_sum - val * above;
        for &i in &order[s..e] {
            out[i] = a;
        }
        below_sum += c * val;
    }
    out
}

/// Adjoint of [`abs_diff_sums_sorted`]: `sum_m sign(v_k - v_m) (g_k + g_m)`.
pub fn abs_diff_adjoint_sorted(v: &[f64], g: &[f64]) -> Vec<f64> {
    let (order, groups) = tie_groups(v);
    let g_total: f64 = g.iter().sum();
    let m = v.len() as f64;
    let mut out = vec![0.0; v.len()];
    let mut g_below = 0.0;
    for &(s, e) in &groups {
        let c = (e - s) as f64;
        let below = s as f64;
        let above = m - below - c;
        let g_group: f64 = order[s..e].iter().map(|&i| g[i]).sum();
        let g_above = g_total - g_below - g_group;
        for &i in &order[s..e] {
            out[i] = g[i] * (below - above) + g_below - g_above;
        }
        g_below += g_group;
    }
    out
}

/// Value, components and parameter gradients of the training objective on
/// one batch with fixed noise `eps` (prediction loss plus the local ℓ0
/// surrogate; the ℓ1 term is left to the proximal step).
pub fn batch_objective_fused(
    params: &GatingParams,
    xb: &Matrix,
    yb: &[usize],
    eps: &Matrix,
    config: &TrainConfig,
) -> Result<(StepLoss, GatingParams)> {
    let b = yb.len();
    let d = xb.cols();
    let k = config.k;
    if k == 0 {
        return Err(ProtoError::ZeroK.into());
    }
    if b < k + 1 {
        return Err(ProtoError::BaseTooSmall {
            k,
            needed: k + 1,
            available: b,
        }
        .into());
    }
    let s_global = params.global_mask(config.eps_zero);
    let xm = masked_inputs(xb, &s_global);
    let h1 = dense_tanh(&xm, &params.w1, &params.b1, true);
    let h2 = dense_tanh(&h1, &params.w2, &params.b2, true);
    let mu = dense_tanh(&h2, &params.w3, &params.b3, false);

    let z: Vec<f64> = mu
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(a, e)| a + e)
        .collect();
    let masked: Vec<f64> = z
        .iter()
        .zip(xb.as_slice())
        .map(|(&zi, &xi)| zi.clamp(0.0, 1.0) * xi)
        .collect();
    let open = z.iter().filter(|&&zi| zi > 0.0).count();
    let row = |i: usize| &masked[i * d..(i + 1) * d];

    let mut dist = vec![0.0; b * b];
    for i in 0..b {
        for j in (i + 1)..b {
            let s: f64 = row(i)
                .iter()
                .zip(row(j))
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            let r = s.sqrt();
            dist[i * b + j] = r;
            dist[j * b + i] = r;
        }
    }

    let others = b - 1;
    let coef: Vec<f64> = (1..=k)
        .map(|n| others as f64 + 1.0 - 2.0 * n as f64)
        .collect();
    let scale = match config.loss_scale {
        crate::train::LossScale::Sum => 1.0,
        crate::train::LossScale::MeanOverK => 1.0 / k as f64,
    } / b as f64;
    let inv_tau = 1.0 / config.tau;

    let mut pred_sum = 0.0;
    let mut dmasked = vec![0.0; b * d];
    let mut v = vec![0.0; others];
    let mut ind = vec![0.0; others];
    let mut dv = vec![0.0; others];
    let mut ga = vec![0.0; others];
    let mut p = vec![0.0; others];
    for i in 0..b {
        let rest = (0..b).filter(|&j| j != i);
        for (slot, j) in rest.clone().enumerate() {
            v[slot] = 1.0 / (dist[i * b + j] + config.delta);
            ind[slot] = if yb[j] == yb[i] { 1.0 } else { 0.0 };
        }
        let a = abs_diff_sums_sorted(&v);
        dv.iter_mut().for_each(|x| *x = 0.0);
        ga.iter_mut().for_each(|x| *x = 0.0);
        let mut hits_total = 0.0;
        for &c in &coef {
            let mut max = f64::NEG_INFINITY;
            for m in 0..others {
                p[m] = (c * v[m] - a[m]) * inv_tau;
                max = max.max(p[m]);
            }
            let mut z = 0.0;
            for pm in p.iter_mut() {
                *pm = (*pm - max).exp();
                z += *pm;
            }
            let mut hits = 0.0;
            for m in 0..others {
                p[m] /= z;
                hits += p[m] * ind[m];
            }
            hits_total += hits;
            // d(-hits)/d score_m = -P_m (ind_m - hits) / tau
            for m in 0..others {
                let ds = scale * p[m] * (hits - ind[m]) * inv_tau;
                dv[m] += c * ds;
                ga[m] -= ds;
            }
        }
        pred_sum += k as f64 - hits_total;
        let ga_v = abs_diff_adjoint_sorted(&v, &ga);
        for (slot, j) in rest.enumerate() {
            let r = dist[i * b + j];
            if r == 0.0 {
                continue;
            }
            let g = dv[slot] + ga_v[slot];
            // v = 1 / (r + delta), r = sqrt(sum diff^2)
            let dr = -g * v[slot] * v[slot];
            let coef_diff = dr / r;
            for t in 0..d {
                let diff = masked[i * d + t] - masked[j * d + t];
                dmasked[i * d + t] += coef_diff * diff;
                dmasked[j * d + t] -= coef_diff * diff;
            }
        }
    }
    let pred = scale * pred_sum;

    let mut dmu = Matrix::zeros(b, d);
    for (idx, g) in dmu.as_mut_slice().iter_mut().enumerate() {
        let zi = z[idx];
        if zi > 0.0 && zi < 1.0 {
            *g = dmasked[idx] * xb.as_slice()[idx];
        }
    }
    let mut local = 0.0;
    if config.lambda_local > 0.0 {
        let c = config.lambda_local / b as f64;
        let sigma = config.sigma;
        for (g, &m) in dmu.as_mut_slice().iter_mut().zip(mu.as_slice()) {
            local += gaussian_tail(m, sigma);
            *g += c * gaussian_pdf(m / sigma) / sigma;
        }
        local *= c;
    }
    let loss = StepLoss {
        pred,
        local,
        mean_l0: open as f64 / b as f64,
    };
    if !loss.total().is_finite() {
        return Ok((
            loss,
            GatingParams::zeros(params.features(), params.hidden()),
        ));
    }

    let hidden = params.hidden();
    let mut gw3 = Matrix::zeros(d, hidden);
    gemm(&dmu, true, &h2, false, &mut gw3, 0.0);
    let gb3 = col_sums(&dmu);
    let mut dz2 = Matrix::zeros(b, hidden);
    gemm(&dmu, false, &params.w3, false, &mut dz2, 0.0);
    for (g, &h) in dz2.as_mut_slice().iter_mut().zip(h2.as_slice()) {
        *g *= 1.0 - h * h;
    }
    let mut gw2 = Matrix::zeros(hidden, hidden);
    gemm(&dz2, true, &h1, false, &mut gw2, 0.0);
    let gb2 = col_sums(&dz2);
    let mut dz1 = Matrix::zeros(b, hidden);
    gemm(&dz2, false, &params.w2, false, &mut dz1, 0.0);
    for (g, &h) in dz1.as_mut_slice().iter_mut().zip(h1.as_slice()) {
        *g *= 1.0 - h * h;
    }
    let mut gw1 = Matrix::zeros(hidden, d);
    gemm(&dz1, true, &xm, false, &mut gw1, 0.0);
    let gb1 = col_sums(&dz1);
    Ok((
        loss,
        GatingParams {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
            w3: gw3,
            b3: gb3,
        },
    ))
}
