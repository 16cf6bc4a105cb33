//! Label-aware Gaussian mixture slice discovery.
//!
//! Clusters the joint evidence (embedding, label, prediction) with a
//! gamma-weighted mixture: the E-step responsibility of component j for
//! sample i is proportional to
//!
//! ```text
//! pi_j * Normal(u_i; mu_j, diag var_j) * [p_j(y_i) * q_j(yhat_i)]^gamma
//! ```
//!
//! computed in log space. M-step updates are responsibility-weighted
//! estimates; the categorical distributions carry add-alpha pseudo-counts
//! and per-dimension variances are floored, so the tracked objective (the
//! data term plus the gamma-scaled Dirichlet smoothing term) is
//! non-decreasing across iterations. With `gamma = 0` the categorical
//! factors drop out entirely and the fit reduces to a plain diagonal GMM.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AuditError, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Fitted mixture over (embedding, label, prediction) evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceModel {
    /// Mixing weights, length K, summing to 1.
    pub weights: Array1<f64>,
    /// Component means, K x d.
    pub means: Array2<f64>,
    /// Per-dimension variances (diagonal covariance), K x d.
    pub variances: Array2<f64>,
    /// P(y | slice j), K x 2.
    pub label_dist: Array2<f64>,
    /// P(yhat | slice j), K x 2.
    pub pred_dist: Array2<f64>,
    pub gamma: f64,
    /// Objective value per EM iteration (non-decreasing).
    pub log_likelihood_trace: Vec<f64>,
}

impl SliceModel {
    pub fn n_slices(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn final_objective(&self) -> f64 {
        *self.log_likelihood_trace.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

/// Per-sample slice memberships plus the beta-thresholded member sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceAssignment {
    /// Posterior membership probabilities, N x K; rows sum to 1.
    pub memberships: Array2<f64>,
    /// For each slice, the sample indices with membership > beta, ascending.
    pub slices: Vec<Vec<usize>>,
    pub beta: f64,
}

/// EM fitting knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub n_init: usize,
    pub var_floor: f64,
    pub smoothing_alpha: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iters: 200,
            tol: 1e-5,
            n_init: 3,
            var_floor: 1e-6,
            smoothing_alpha: 1e-2,
        }
    }
}

/// Discovery flavor: the label-aware mixture over all samples, or plain
/// GMM restricted to misclassified samples within each class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoveryMode {
    Domino,
    ErrorOnly,
}

/// Fits the gamma-weighted slice mixture by EM, returning the best of
/// `opts.n_init` seeded restarts (seeds `seed`, `seed+1`, ...; ties keep
/// the earliest restart).
pub fn fit_slice_model(
    u: &Array2<f64>,
    y: &[u8],
    yhat: &[u8],
    n_slices: usize,
    gamma: f64,
    seed: u64,
    opts: &FitOptions,
) -> Result<SliceModel> {
    let n = u.nrows();
    if n_slices == 0 || n <= n_slices {
        return Err(AuditError::InvalidArgument(format!(
            "need N > K >= 1, got N={n}, K={n_slices}"
        )));
    }
    fit_em(u, y, yhat, n_slices, gamma, seed, opts)
}

/// Initial parameters from k-means++ centers and the induced hard
/// partition. Shared by the EM driver and by oracle tests that need an
/// identical starting point.
pub fn init_model(
    u: &Array2<f64>,
    y: &[u8],
    yhat: &[u8],
    n_slices: usize,
    gamma: f64,
    seed: u64,
    opts: &FitOptions,
) -> Result<SliceModel> {
    check_inputs(u, y, yhat, n_slices)?;
    let (n, d) = u.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_pp_centers(u, n_slices, &mut rng);

    // hard-assign each row to its nearest center, ties to the lower index
    let assignment: Vec<usize> = (0..n)
        .map(|i| {
            let mut best = (f64::INFINITY, 0usize);
            for (j, &c) in centers.iter().enumerate() {
                let dist = sq_distance(u, i, u, c);
                if dist < best.0 {
                    best = (dist, j);
                }
            }
            best.1
        })
        .collect();

    let global_var: Vec<f64> = {
        let mean = u.mean_axis(ndarray::Axis(0)).expect("non-empty");
        (0..d)
            .map(|j| {
                let v = u.column(j).iter().map(|x| (x - mean[j]).powi(2)).sum::<f64>() / n as f64;
                v.max(opts.var_floor)
            })
            .collect()
    };

    let alpha = opts.smoothing_alpha;
    let mut weights = Array1::zeros(n_slices);
    let mut means = Array2::zeros((n_slices, d));
    let mut variances = Array2::zeros((n_slices, d));
    let mut label_dist = Array2::zeros((n_slices, 2));
    let mut pred_dist = Array2::zeros((n_slices, 2));

    for j in 0..n_slices {
        let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == j).collect();
        if members.is_empty() {
            // possible only with duplicate rows; fall back to the center point
            weights[j] = 1.0 / n as f64;
            for dd in 0..d {
                means[[j, dd]] = u[[centers[j], dd]];
                variances[[j, dd]] = global_var[dd];
            }
            label_dist[[j, 0]] = 0.5;
            label_dist[[j, 1]] = 0.5;
            pred_dist[[j, 0]] = 0.5;
            pred_dist[[j, 1]] = 0.5;
            continue;
        }
        let m = members.len() as f64;
        weights[j] = m / n as f64;
        for dd in 0..d {
            let mean = members.iter().map(|&i| u[[i, dd]]).sum::<f64>() / m;
            let var = members.iter().map(|&i| (u[[i, dd]] - mean).powi(2)).sum::<f64>() / m;
            means[[j, dd]] = mean;
            variances[[j, dd]] = var.max(opts.var_floor);
        }
        let y1 = members.iter().filter(|&&i| y[i] == 1).count() as f64;
        let p1 = members.iter().filter(|&&i| yhat[i] == 1).count() as f64;
        label_dist[[j, 1]] = (y1 + alpha) / (m + 2.0 * alpha);
        label_dist[[j, 0]] = 1.0 - label_dist[[j, 1]];
        pred_dist[[j, 1]] = (p1 + alpha) / (m + 2.0 * alpha);
        pred_dist[[j, 0]] = 1.0 - pred_dist[[j, 1]];
    }
    let total = weights.sum();
    weights.mapv_inplace(|w| w / total);

    Ok(SliceModel {
        weights,
        means,
        variances,
        label_dist,
        pred_dist,
        gamma,
        log_likelihood_trace: Vec::new(),
    })
}

fn check_inputs(u: &Array2<f64>, y: &[u8], yhat: &[u8], n_slices: usize) -> Result<()> {
    let n = u.nrows();
    if n_slices == 0 || n < n_slices {
        return Err(AuditError::InvalidArgument(format!(
            "need N >= K >= 1, got N={n}, K={n_slices}"
        )));
    }
    if y.len() != n || yhat.len() != n {
        return Err(AuditError::DimensionMismatch(format!(
            "labels ({}) and predictions ({}) must match N={n}",
            y.len(),
            yhat.len()
        )));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(AuditError::NonFinite("slice model input".into()));
    }
    let mut distinct = std::collections::BTreeSet::new();
    for row in u.rows() {
        distinct.insert(row.iter().map(|v| v.to_bits()).collect::<Vec<u64>>());
        if distinct.len() >= n_slices {
            break;
        }
    }
    if distinct.len() < n_slices {
        return Err(AuditError::InsufficientDiversity(format!(
            "{} distinct rows for K={n_slices} components",
            distinct.len()
        )));
    }
    Ok(())
}

/// EM driver; requires N >= K (the public wrapper enforces N > K, the
/// error-only path legitimately runs with N == K).
fn fit_em(
    u: &Array2<f64>,
    y: &[u8],
    yhat: &[u8],
    n_slices: usize,
    gamma: f64,
    seed: u64,
    opts: &FitOptions,
) -> Result<SliceModel> {
    if gamma < 0.0 || !gamma.is_finite() {
        return Err(AuditError::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
    }
    if opts.n_init == 0 {
        return Err(AuditError::InvalidArgument("n_init must be >= 1".into()));
    }
    let mut best: Option<SliceModel> = None;
    for restart in 0..opts.n_init {
        let mut model =
            init_model(u, y, yhat, n_slices, gamma, seed.wrapping_add(restart as u64), opts)?;
        run_em(&mut model, u, y, yhat, opts);
        if best.as_ref().is_none_or(|b| model.final_objective() > b.final_objective()) {
            best = Some(model);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

fn run_em(model: &mut SliceModel, u: &Array2<f64>, y: &[u8], yhat: &[u8], opts: &FitOptions) {
    let mut resp = Array2::zeros((u.nrows(), model.n_slices()));
    let mut obj = e_step(model, u, y, yhat, &mut resp) + smoothing_penalty(model, opts);
    model.log_likelihood_trace.push(obj);
    for _ in 0..opts.max_iters {
        m_step(model, u, y, yhat, &resp, opts);
        let next = e_step(model, u, y, yhat, &mut resp) + smoothing_penalty(model, opts);
        model.log_likelihood_trace.push(next);
        let rel = (next - obj).abs() / obj.abs().max(1.0);
        obj = next;
        if rel < opts.tol {
            break;
        }
    }
}

/// Log-space E-step. Fills `resp` with normalized responsibilities and
/// returns the data log-likelihood term.
fn e_step(model: &SliceModel, u: &Array2<f64>, y: &[u8], yhat: &[u8], resp: &mut Array2<f64>) -> f64 {
    let (n, d) = u.dim();
    let k = model.n_slices();
    let gamma = model.gamma;

    // per-component constants: ln pi_j - 0.5 (d ln 2pi + sum ln var_jd)
    let base: Vec<f64> = (0..k)
        .map(|j| {
            let logdet: f64 = (0..d).map(|dd| model.variances[[j, dd]].ln()).sum();
            model.weights[j].ln() - 0.5 * (d as f64 * LN_2PI + logdet)
        })
        .collect();

    let mut total = 0.0;
    let mut logw = vec![0.0; k];
    for i in 0..n {
        for (j, lw) in logw.iter_mut().enumerate() {
            let mut quad = 0.0;
            for dd in 0..d {
                let diff = u[[i, dd]] - model.means[[j, dd]];
                quad += diff * diff / model.variances[[j, dd]];
            }
            let mut v = base[j] - 0.5 * quad;
            if gamma > 0.0 {
                v += gamma
                    * (model.label_dist[[j, y[i] as usize]].ln()
                        + model.pred_dist[[j, yhat[i] as usize]].ln());
            }
            *lw = v;
        }
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logw.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum_exp.ln();
        total += lse;
        for j in 0..k {
            resp[[i, j]] = (logw[j] - lse).exp();
        }
    }
    total
}

/// Gamma-scaled Dirichlet term added by the add-alpha M-step; including it
/// in the tracked objective keeps the trace exactly non-decreasing.
fn smoothing_penalty(model: &SliceModel, opts: &FitOptions) -> f64 {
    if model.gamma == 0.0 {
        return 0.0;
    }
    let mut pen = 0.0;
    for j in 0..model.n_slices() {
        for c in 0..2 {
            pen += model.label_dist[[j, c]].ln() + model.pred_dist[[j, c]].ln();
        }
    }
    model.gamma * opts.smoothing_alpha * pen
}

fn m_step(
    model: &mut SliceModel,
    u: &Array2<f64>,
    y: &[u8],
    yhat: &[u8],
    resp: &Array2<f64>,
    opts: &FitOptions,
) {
    let (n, d) = u.dim();
    let k = model.n_slices();
    let alpha = opts.smoothing_alpha;

    for j in 0..k {
        let mass: f64 = (0..n).map(|i| resp[[i, j]]).sum();
        if mass == 0.0 {
            // dead component: keep its location, zero its weight
            model.weights[j] = 0.0;
            for c in 0..2 {
                model.label_dist[[j, c]] = 0.5;
                model.pred_dist[[j, c]] = 0.5;
            }
            continue;
        }
        model.weights[j] = mass / n as f64;
        for dd in 0..d {
            let mean: f64 = (0..n).map(|i| resp[[i, j]] * u[[i, dd]]).sum::<f64>() / mass;
            let var: f64 =
                (0..n).map(|i| resp[[i, j]] * (u[[i, dd]] - mean).powi(2)).sum::<f64>() / mass;
            model.means[[j, dd]] = mean;
            model.variances[[j, dd]] = var.max(opts.var_floor);
        }
        let y1: f64 = (0..n).filter(|&i| y[i] == 1).map(|i| resp[[i, j]]).sum();
        let p1: f64 = (0..n).filter(|&i| yhat[i] == 1).map(|i| resp[[i, j]]).sum();
        model.label_dist[[j, 1]] = (y1 + alpha) / (mass + 2.0 * alpha);
        model.label_dist[[j, 0]] = (mass - y1 + alpha) / (mass + 2.0 * alpha);
        model.pred_dist[[j, 1]] = (p1 + alpha) / (mass + 2.0 * alpha);
        model.pred_dist[[j, 0]] = (mass - p1 + alpha) / (mass + 2.0 * alpha);
    }
}

/// Posterior memberships under a fitted model, plus the beta-thresholded
/// member sets (`memberships[i][j] > beta`).
pub fn assign_slices(
    model: &SliceModel,
    u: &Array2<f64>,
    y: &[u8],
    yhat: &[u8],
    beta: f64,
) -> Result<SliceAssignment> {
    let n = u.nrows();
    if u.ncols() != model.dim() {
        return Err(AuditError::DimensionMismatch(format!(
            "model expects dim {}, got {}",
            model.dim(),
            u.ncols()
        )));
    }
    if y.len() != n || yhat.len() != n {
        return Err(AuditError::DimensionMismatch(
            "labels/predictions must match row count".into(),
        ));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(AuditError::InvalidArgument(format!("beta must be in [0,1), got {beta}")));
    }
    let mut memberships = Array2::zeros((n, model.n_slices()));
    e_step(model, u, y, yhat, &mut memberships);
    let slices = (0..model.n_slices())
        .map(|j| (0..n).filter(|&i| memberships[[i, j]] > beta).collect())
        .collect();
    Ok(SliceAssignment {
        memberships,
        slices,
        beta,
    })
}

/// Orders slices by empirical error rate among beta-assigned members,
/// descending; ties broken by larger slice, then lower index. Empty
/// slices sort last.
pub fn rank_slices(assignment: &SliceAssignment, y: &[u8], yhat: &[u8]) -> Vec<usize> {
    let mut keyed: Vec<(bool, f64, usize, usize)> = assignment
        .slices
        .iter()
        .enumerate()
        .map(|(j, members)| {
            if members.is_empty() {
                (true, 0.0, 0, j)
            } else {
                let wrong = members.iter().filter(|&&i| y[i] != yhat[i]).count();
                (false, wrong as f64 / members.len() as f64, members.len(), j)
            }
        })
        .collect();
    keyed.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(b.1.total_cmp(&a.1))
            .then(b.2.cmp(&a.2))
            .then(a.3.cmp(&b.3))
    });
    keyed.into_iter().map(|(_, _, _, j)| j).collect()
}

/// Empirical error rate of each beta-assigned slice (NaN-free; empty
/// slices report 0).
pub fn slice_error_rates(assignment: &SliceAssignment, y: &[u8], yhat: &[u8]) -> Vec<f64> {
    assignment
        .slices
        .iter()
        .map(|members| {
            if members.is_empty() {
                0.0
            } else {
                members.iter().filter(|&&i| y[i] != yhat[i]).count() as f64 / members.len() as f64
            }
        })
        .collect()
}

/// Plain GMM clustering restricted to misclassified samples within each
/// class. Per-class fits (up to `n_slices` components each, fewer when a
/// class has fewer errors) are merged into one model whose categorical
/// distributions record class provenance as one-hot rows. The merged
/// model has `gamma = 0`, so downstream assignment ranks by embedding
/// evidence alone.
pub fn fit_error_only(
    u: &Array2<f64>,
    y: &[u8],
    yhat: &[u8],
    n_slices: usize,
    seed: u64,
    opts: &FitOptions,
) -> Result<SliceModel> {
    let n = u.nrows();
    if y.len() != n || yhat.len() != n {
        return Err(AuditError::DimensionMismatch(
            "labels/predictions must match row count".into(),
        ));
    }
    if n_slices == 0 {
        return Err(AuditError::InvalidArgument("need K >= 1".into()));
    }
    let per_class: Vec<Vec<usize>> = (0..2u8)
        .map(|c| {
            (0..n)
                .filter(|&i| y[i] == c && yhat[i] != y[i])
                .collect()
        })
        .collect();
    let total_err: usize = per_class.iter().map(Vec::len).sum();
    if total_err == 0 {
        return Err(AuditError::InsufficientErrors("no misclassified samples".into()));
    }
    if per_class.iter().all(|idx| idx.len() < n_slices) {
        return Err(AuditError::InsufficientErrors(format!(
            "fewer than K={n_slices} misclassified samples in both classes \
             ({} in class 0, {} in class 1)",
            per_class[0].len(),
            per_class[1].len()
        )));
    }

    let d = u.ncols();
    let mut weights = Vec::new();
    let mut means: Vec<f64> = Vec::new();
    let mut variances: Vec<f64> = Vec::new();
    let mut label_rows: Vec<[f64; 2]> = Vec::new();
    let mut pred_rows: Vec<[f64; 2]> = Vec::new();
    let mut traces: Vec<Vec<f64>> = Vec::new();

    for (c, idx) in per_class.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let k_c = n_slices.min(idx.len());
        let sub_u = Array2::from_shape_fn((idx.len(), d), |(r, dd)| u[[idx[r], dd]]);
        let sub_y: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
        let sub_yhat: Vec<u8> = idx.iter().map(|&i| yhat[i]).collect();
        let class_seed = seed.wrapping_add((c as u64) * opts.n_init as u64);
        let sub = fit_em(&sub_u, &sub_y, &sub_yhat, k_c, 0.0, class_seed, opts)?;

        let share = idx.len() as f64 / total_err as f64;
        for j in 0..k_c {
            weights.push(sub.weights[j] * share);
            for dd in 0..d {
                means.push(sub.means[[j, dd]]);
                variances.push(sub.variances[[j, dd]]);
            }
            let mut label = [0.0; 2];
            label[c] = 1.0;
            label_rows.push(label);
            // a misclassified sample of class c was predicted as 1-c
            let mut pred = [0.0; 2];
            pred[1 - c] = 1.0;
            pred_rows.push(pred);
        }
        traces.push(sub.log_likelihood_trace);
    }

    let k_total = weights.len();
    let trace_len = traces.iter().map(Vec::len).max().unwrap_or(0);
    // element-wise sum of the per-class objectives, shorter traces padded
    // with their converged value; each addend is non-decreasing, so the
    // merged trace is too
    let log_likelihood_trace: Vec<f64> = (0..trace_len)
        .map(|t| {
            traces
                .iter()
                .map(|tr| *tr.get(t).or(tr.last()).unwrap_or(&0.0))
                .sum()
        })
        .collect();

    Ok(SliceModel {
        weights: Array1::from_vec(weights),
        means: Array2::from_shape_vec((k_total, d), means).expect("shape"),
        variances: Array2::from_shape_vec((k_total, d), variances).expect("shape"),
        label_dist: Array2::from_shape_fn((k_total, 2), |(j, c)| label_rows[j][c]),
        pred_dist: Array2::from_shape_fn((k_total, 2), |(j, c)| pred_rows[j][c]),
        gamma: 0.0,
        log_likelihood_trace,
    })
}

/// k-means++ center selection (indices into `u`), deterministic given the
/// RNG state.
fn kmeans_pp_centers(u: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = u.nrows();
    let mut centers = Vec::with_capacity(k);
    centers.push(rng.random_range(0..n));
    let mut d2 = vec![f64::INFINITY; n];
    while centers.len() < k {
        let last = *centers.last().expect("non-empty");
        let mut total = 0.0;
        for (i, slot) in d2.iter_mut().enumerate() {
            let dist = sq_distance(u, i, u, last);
            if dist < *slot {
                *slot = dist;
            }
            total += *slot;
        }
        let next = if total > 0.0 {
            let x = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > x {
                    chosen = Some(i);
                    break;
                }
            }
            chosen.unwrap_or_else(|| {
                // float overshoot: last index with positive weight
                (0..n).rev().find(|&i| d2[i] > 0.0).expect("total > 0")
            })
        } else {
            // all remaining points coincide with chosen centers
            (0..n).find(|i| !centers.contains(i)).unwrap_or(0)
        };
        centers.push(next);
    }
    centers
}

fn sq_distance(a: &Array2<f64>, i: usize, b: &Array2<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|d| (a[[i, d]] - b[[j, d]]).powi(2)).sum()
}
