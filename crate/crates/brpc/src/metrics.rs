//! Evaluation: parameter and response errors, CRPS, event-level restart scores, the
//! propagation-contraction replay and the discrepancy tracking bound.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{BrpcError, Result};
use crate::gaussian::GaussianState;

/// Slack for calling a replayed contraction factor "at most one".
pub const GAMMA_TOL: f64 = 1e-9;

/// Relative eigenvalue cutoff for pseudo-inverses of recorded covariances.
const PINV_RTOL: f64 = 1e-13;

/// `sqrt(mean_b ‖θ̂_b − θ†_b‖²)`.
pub fn theta_rmse(estimates: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(BrpcError::invalid(format!(
            "{} estimates against {} targets",
            estimates.len(),
            truth.len()
        )));
    }
    let mut sse = 0.0;
    for (e, t) in estimates.iter().zip(truth) {
        if e.len() != t.len() {
            return Err(BrpcError::invalid("estimate and target differ in dimension"));
        }
        sse += e.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok((sse / estimates.len() as f64).sqrt())
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// `E|Z|` for `Z ~ N(mu, var)`.
fn abs_moment(mu: f64, var: f64) -> f64 {
    if var <= 0.0 {
        return mu.abs();
    }
    let s = var.sqrt();
    let z = mu / s;
    2.0 * s * std_normal_pdf(z) + mu * (2.0 * std_normal_cdf(z) - 1.0)
}

/// CRPS of a univariate Gaussian mixture at `y`:
/// `Σ w_i E|X_i − y| − ½ ΣΣ w_i w_j E|X_i − X_j|`.
pub fn crps_gaussian_mixture(weights: &[f64], means: &[f64], sds: &[f64], y: f64) -> f64 {
    let n = weights.len();
    let mut first = 0.0;
    for i in 0..n {
        first += weights[i] * abs_moment(means[i] - y, sds[i] * sds[i]);
    }
    let mut second = 0.0;
    for i in 0..n {
        second += weights[i] * weights[i] * abs_moment(0.0, 2.0 * sds[i] * sds[i]);
        for j in (i + 1)..n {
            second += 2.0 * weights[i] * weights[j] * abs_moment(means[i] - means[j], sds[i] * sds[i] + sds[j] * sds[j]);
        }
    }
    (first - 0.5 * second).max(0.0)
}

/// Moment-matched merge of components that share a standard deviation and whose
/// means lie within `rel_tol · sd` of their group's first mean. Keeps the mixture
/// mean and variance exactly; used to keep pairwise CRPS affordable for particle
/// mixtures whose components pile up.
pub fn merge_components(weights: &[f64], means: &[f64], sds: &[f64], rel_tol: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut idx: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0.0).collect();
    idx.sort_by(|&a, &b| sds[a].total_cmp(&sds[b]).then(means[a].total_cmp(&means[b])));
    let (mut w, mut m, mut s) = (Vec::new(), Vec::new(), Vec::new());
    let mut k = 0;
    while k < idx.len() {
        let head = idx[k];
        let (sd, start) = (sds[head], means[head]);
        let (mut tw, mut t1, mut t2) = (0.0, 0.0, 0.0);
        while k < idx.len() && sds[idx[k]] == sd && means[idx[k]] - start <= rel_tol * sd {
            let i = idx[k];
            tw += weights[i];
            t1 += weights[i] * means[i];
            t2 += weights[i] * means[i] * means[i];
            k += 1;
        }
        let mu = t1 / tw;
        let spread = (t2 / tw - mu * mu).max(0.0);
        w.push(tw);
        m.push(mu);
        s.push((sd * sd + spread).sqrt());
    }
    (w, m, s)
}

/// CRPS of a weighted sample: `Σ w_i|x_i − y| − ½ ΣΣ w_i w_j |x_i − x_j|`, with the
/// pairwise term computed from the sorted sample.
pub fn crps_ensemble(weights: &[f64], values: &[f64], y: f64) -> f64 {
    let first: f64 = weights.iter().zip(values).map(|(w, x)| w * (x - y).abs()).sum();
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let (mut cw, mut cs, mut pairs) = (0.0, 0.0, 0.0);
    for &i in &order {
        pairs += weights[i] * (values[i] * cw - cs);
        cw += weights[i];
        cs += weights[i] * values[i];
    }
    (first - pairs).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventMetrics {
    /// `None` when there are neither restarts nor changepoints.
    pub precision: Option<f64>,
    /// `None` when there are no changepoints.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// Mean `restart − changepoint` over matched pairs, in batches.
    pub delay: Option<f64>,
    pub restarts: usize,
    pub matched: usize,
}

/// Greedy one-to-one matching: each changepoint takes the earliest unmatched restart
/// in `[cp, cp + tol]`.
pub fn event_metrics(restarts: &[usize], changepoints: &[usize], tol: usize) -> EventMetrics {
    let mut r = restarts.to_vec();
    r.sort_unstable();
    let mut c = changepoints.to_vec();
    c.sort_unstable();
    let mut used = vec![false; r.len()];
    let mut delays = Vec::new();
    for &cp in &c {
        if let Some(k) = (0..r.len()).find(|&k| !used[k] && r[k] >= cp && r[k] <= cp + tol) {
            used[k] = true;
            delays.push((r[k] - cp) as f64);
        }
    }
    let matched = delays.len();
    let precision = if !r.is_empty() {
        Some(matched as f64 / r.len() as f64)
    } else if !c.is_empty() {
        Some(0.0)
    } else {
        None
    };
    let recall = (!c.is_empty()).then(|| matched as f64 / c.len() as f64);
    let f1 = match (precision, recall) {
        (Some(p), Some(q)) if p + q > 0.0 => Some(2.0 * p * q / (p + q)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    let delay = (matched > 0).then(|| delays.iter().sum::<f64>() / matched as f64);
    EventMetrics {
        precision,
        recall,
        f1,
        delay,
        restarts: r.len(),
        matched,
    }
}

/// One discrepancy step as recorded for replay: previous posterior `(m_{t−1}, C_{t−1})`,
/// transition `A_t`, pre-update `(a_t, P_t)`, operator `G_t`, residual covariance
/// `R_t`, residuals `r_t`, tempering `η` and posterior `(m_t, C_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationRecord {
    pub batch: usize,
    /// First step after a (re)initialization of the discrepancy state.
    pub segment_start: bool,
    pub prev: GaussianState,
    pub transition: DMatrix<f64>,
    pub pre: GaussianState,
    pub g: DMatrix<f64>,
    pub r_eff: DMatrix<f64>,
    pub residuals: DVector<f64>,
    pub eta: f64,
    pub post: GaussianState,
}

/// Per-batch entry of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub batch: usize,
    pub theta_mean: Vec<f64>,
    pub theta_crps: f64,
    /// Marginal predictive means of the batch responses, made before the batch was seen.
    pub y_pred_mean: Vec<f64>,
    pub y_sq_err: f64,
    pub y_crps: f64,
    pub n_obs: usize,
    /// Log predictive density of the batch under the pre-update law.
    pub log_pred: f64,
    pub restart: bool,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub entries: Vec<BatchLog>,
    pub propagation: Option<Vec<PropagationRecord>>,
}

impl RunLog {
    pub fn restart_batches(&self) -> Vec<usize> {
        self.entries.iter().filter(|e| e.restart).map(|e| e.batch).collect()
    }

    pub fn theta_estimates(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.theta_mean.clone()).collect()
    }

    pub fn y_rmse(&self) -> f64 {
        let n: usize = self.entries.iter().map(|e| e.n_obs).sum();
        (self.entries.iter().map(|e| e.y_sq_err).sum::<f64>() / n as f64).sqrt()
    }

    /// Mean CRPS per observation.
    pub fn y_crps(&self) -> f64 {
        let n: usize = self.entries.iter().map(|e| e.n_obs).sum();
        self.entries.iter().map(|e| e.y_crps).sum::<f64>() / n as f64
    }

    pub fn theta_crps(&self) -> f64 {
        self.entries.iter().map(|e| e.theta_crps).sum::<f64>() / self.entries.len() as f64
    }
}

fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// PSD square root and pseudo-inverse square root via the symmetric eigendecomposition.
fn psd_roots(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetric_part(m));
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let cut = PINV_RTOL * top;
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let inv_root = eig.eigenvalues.map(|l| if l > cut { 1.0 / l.sqrt() } else { 0.0 });
    let v = &eig.eigenvectors;
    (
        v * DMatrix::from_diagonal(&root) * v.transpose(),
        v * DMatrix::from_diagonal(&inv_root) * v.transpose(),
    )
}

fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (_, ir) = psd_roots(m);
    &ir * &ir
}

fn lambda_max(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(symmetric_part(m)).eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaReplay {
    /// `(batch, γ_prior, γ_post)` per replayed step.
    pub steps: Vec<(usize, f64, f64)>,
    pub median_prior: f64,
    pub max_prior: f64,
    pub frac_prior_le_one: f64,
    pub median_post: f64,
    pub max_post: f64,
}

/// `γ_prior,t = λmax(C_{t−1}^{1/2} A_tᵀ P_t⁻¹ A_t C_{t−1}^{1/2})` and
/// `γ_post,t = λmax(C_{t−1}^{1/2} A_tᵀ C_t⁻¹ A_t C_{t−1}^{1/2})` with
/// `C_t⁻¹ = P_t⁻¹ + η G_tᵀ R_t⁻¹ G_t`. Segment starts are skipped.
pub fn gamma_step(rec: &PropagationRecord) -> Result<(f64, f64)> {
    let n_prev = rec.prev.dim();
    if rec.transition.ncols() != n_prev || rec.transition.nrows() != rec.pre.dim() {
        return Err(BrpcError::invalid("transition does not map the previous state onto the current one"));
    }
    let (c_half, _) = psd_roots(&rec.prev.covariance);
    let b = &rec.transition * &c_half;
    let m_pre = pinv(&rec.pre.covariance);
    let rinv = pinv(&rec.r_eff);
    let info = rec.g.transpose() * rinv * &rec.g * rec.eta;
    let prior = b.transpose() * &m_pre * &b;
    let post = b.transpose() * (m_pre + info) * &b;
    Ok((lambda_max(&prior), lambda_max(&post)))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn gamma_replay(log: &RunLog) -> Result<GammaReplay> {
    let recs = log
        .propagation
        .as_ref()
        .ok_or_else(|| BrpcError::MissingDiagnostics("run was recorded without propagation tuples".into()))?;
    gamma_replay_records(recs)
}

pub fn gamma_replay_records(recs: &[PropagationRecord]) -> Result<GammaReplay> {
    let mut steps = Vec::new();
    for r in recs.iter().filter(|r| !r.segment_start && r.prev.dim() > 0) {
        let (p, q) = gamma_step(r)?;
        steps.push((r.batch, p, q));
    }
    if steps.is_empty() {
        return Err(BrpcError::MissingDiagnostics("no replayable propagation steps".into()));
    }
    let mut prior: Vec<f64> = steps.iter().map(|s| s.1).collect();
    let mut post: Vec<f64> = steps.iter().map(|s| s.2).collect();
    let frac = prior.iter().filter(|g| **g <= 1.0 + GAMMA_TOL).count() as f64 / prior.len() as f64;
    let max_prior = prior.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let max_post = post.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(GammaReplay {
        median_prior: median(&mut prior),
        max_prior,
        frac_prior_le_one: frac,
        median_post: median(&mut post),
        max_post,
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingBound {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

fn sq_norm(v: &DVector<f64>, metric: &DMatrix<f64>) -> f64 {
    v.dot(&(metric * v))
}

fn batch_loss(rec: &PropagationRecord, u: &DVector<f64>, rinv: &DMatrix<f64>) -> f64 {
    0.5 * sq_norm(&(&rec.residuals - &rec.g * u), rinv)
}

/// Both sides of
/// `Σ_t {ℓ_t(m_t) − ℓ_t(v_t)} ≤ ‖v_0 − m_0‖²_{C_0⁻¹}/(2η) + Σ_t ‖v_t − A_t v_{t−1}‖²_{P_t⁻¹}/(2η(1−γ))`
/// over one run segment. `reference` holds `v_0, …, v_T`; `initial` is `(m_0, C_0)`.
pub fn tracking_bound_check(
    initial: &GaussianState,
    records: &[PropagationRecord],
    reference: &[DVector<f64>],
    gamma: f64,
    eta: f64,
) -> Result<TrackingBound> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(BrpcError::invalid(format!("γ must lie in [0, 1), got {gamma}")));
    }
    if !(eta > 0.0) {
        return Err(BrpcError::invalid("η must be positive"));
    }
    if reference.len() != records.len() + 1 {
        return Err(BrpcError::invalid(format!(
            "reference path needs {} states, got {}",
            records.len() + 1,
            reference.len()
        )));
    }
    if reference[0].len() != initial.dim() {
        return Err(BrpcError::invalid("v_0 does not match the initial state"));
    }
    let d0 = &reference[0] - &initial.mean;
    let init = if initial.dim() == 0 { 0.0 } else { sq_norm(&d0, &pinv(&initial.covariance)) };
    let mut lhs = 0.0;
    let mut variation = 0.0;
    for (t, rec) in records.iter().enumerate() {
        let (v_prev, v) = (&reference[t], &reference[t + 1]);
        if (rec.eta - eta).abs() > 0.0 {
            return Err(BrpcError::invalid("records were produced with a different η"));
        }
        if v.len() != rec.post.dim() || rec.transition.ncols() != v_prev.len() {
            return Err(BrpcError::invalid(format!("reference state {t} does not match the recorded dimensions")));
        }
        let rinv = pinv(&rec.r_eff);
        lhs += batch_loss(rec, &rec.post.mean, &rinv) - batch_loss(rec, v, &rinv);
        let drift = v - &rec.transition * v_prev;
        variation += sq_norm(&drift, &pinv(&rec.pre.covariance));
    }
    let rhs = init / (2.0 * eta) + variation / (2.0 * eta * (1.0 - gamma));
    Ok(TrackingBound {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9 * rhs.abs().max(1.0),
    })
}
