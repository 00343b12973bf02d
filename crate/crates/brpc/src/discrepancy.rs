//! Recursive Gaussian discrepancy learning.
//!
//! The discrepancy posterior lives on a finite support. Three representations
//! share the same tempered update:
//!
//! * `E` grows the support with every batch and extends the carried posterior to
//!   the new points through the GP conditional.
//! * `F` keeps a fixed support `Z`; batch values enter through `K_XZ K_ZZ⁻¹` and the
//!   conditional variance of `δ(X)` given `δ(Z)` is absorbed into the noise.
//! * `P` carries the posterior as proxy observations on the support, so the state
//!   can be re-conditioned under a different kernel. With a fixed kernel it is
//!   algebraically identical to `E`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{BrpcError, Result};
use crate::gaussian::{
    gp_condition, gram, repair_psd, repair_psd_against, symmetrize, GaussianState, KernelConfig, PdFactor, SupportSet,
};
use crate::mixture::{GaussianMixture, MixtureCovariance};
use crate::simulator::SimulatorSpec;
use crate::stream::sobol::sobol_points;
use crate::stream::Batch;
use crate::theta::ParticleCloud;

pub const DEDUP_TOL: f64 = 1e-12;
const PROXY_TOL: f64 = 1e-6;
const PROXY_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    E,
    F,
    P,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    #[default]
    Shared,
    ParticleSpecific,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscrepancyUpdateConfig {
    pub variant: Variant,
    pub kernel: KernelConfig,
    pub eta_delta: f64,
    pub residual_noise_sd: f64,
    /// Random-walk inflation of the carried covariance; variant `F` only.
    pub inflation_sd: f64,
    pub fixed_support_size: usize,
    pub max_support: usize,
    pub representation: Representation,
    /// Most recent observations used by a residual re-anchoring refit.
    pub rra_window: usize,
}

impl Default for DiscrepancyUpdateConfig {
    fn default() -> Self {
        DiscrepancyUpdateConfig {
            variant: Variant::E,
            kernel: KernelConfig {
                signal_variance: 0.01,
                lengthscale: 1.0,
                jitter: 1e-10,
            },
            eta_delta: 1.0,
            residual_noise_sd: 0.05,
            inflation_sd: 0.0,
            fixed_support_size: 32,
            max_support: 400,
            representation: Representation::Shared,
            rra_window: 400,
        }
    }
}

impl DiscrepancyUpdateConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        if !(self.eta_delta > 0.0) {
            return Err(BrpcError::invalid("eta_delta must be positive"));
        }
        if !(self.residual_noise_sd > 0.0) {
            return Err(BrpcError::invalid("residual_noise_sd must be positive"));
        }
        if !(self.inflation_sd >= 0.0) {
            return Err(BrpcError::invalid("inflation_sd must be nonnegative"));
        }
        if self.inflation_sd > 0.0 && self.variant != Variant::F {
            return Err(BrpcError::invalid("covariance inflation is only defined for variant F"));
        }
        if self.fixed_support_size == 0 || self.max_support == 0 || self.rra_window == 0 {
            return Err(BrpcError::invalid("support sizes and the refit window must be positive"));
        }
        if self.variant == Variant::P && self.representation == Representation::ParticleSpecific {
            return Err(BrpcError::invalid(
                "variant P supports only the shared discrepancy representation",
            ));
        }
        Ok(())
    }

    fn noise_var(&self) -> f64 {
        self.residual_noise_sd * self.residual_noise_sd
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualSource {
    Shared,
    Particle(usize),
    RraSegment,
}

#[derive(Debug, Clone)]
pub struct ResidualBatch {
    pub inputs: SupportSet,
    pub residuals: DVector<f64>,
    pub source: ResidualSource,
}

/// `r = Y - Σ_i w_i y_s(X, θ_i)`.
pub fn shared_residual(batch: &Batch, cloud: &ParticleCloud, sim: &SimulatorSpec) -> ResidualBatch {
    let mut fitted = DVector::zeros(batch.len());
    for (p, w) in cloud.particles().zip(cloud.weights()) {
        if *w == 0.0 {
            continue;
        }
        fitted.axpy(*w, &sim.eval_batch(&batch.inputs, p), 1.0);
    }
    ResidualBatch {
        inputs: batch.inputs.clone(),
        residuals: &batch.observations - fitted,
        source: ResidualSource::Shared,
    }
}

/// Column `i` holds `Y - y_s(X, θ_i)`.
pub fn particle_residuals(batch: &Batch, cloud: &ParticleCloud, sim: &SimulatorSpec) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(batch.len(), cloud.len());
    for (i, p) in cloud.particles().enumerate() {
        out.set_column(i, &(&batch.observations - sim.eval_batch(&batch.inputs, p)));
    }
    out
}

/// `M` support points on the unit cube: a uniform grid in one dimension, a Sobol
/// design otherwise.
pub fn fixed_support(m: usize, dim: usize) -> SupportSet {
    if dim == 1 {
        let xs: Vec<f64> = if m == 1 {
            vec![0.5]
        } else {
            (0..m).map(|i| i as f64 / (m - 1) as f64).collect()
        };
        SupportSet::from_scalars(&xs)
    } else {
        let pts = sobol_points(m + 1, dim).split_off(dim);
        SupportSet::from_flat(dim, pts).expect("sobol output has whole points")
    }
}

/// Carried proxy in information form: precision `Λ⁻¹` and vector `Λ⁻¹ ỹ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProxyInfo {
    precision: DMatrix<f64>,
    info: DVector<f64>,
}

impl ProxyInfo {
    fn empty(n: usize) -> Self {
        ProxyInfo {
            precision: DMatrix::zeros(n, n),
            info: DVector::zeros(n),
        }
    }

    fn extended(&self, n: usize) -> Self {
        let mut out = ProxyInfo::empty(n);
        let k = self.info.len();
        out.precision.view_mut((0, 0), (k, k)).copy_from(&self.precision);
        out.info.rows_mut(0, k).copy_from(&self.info);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyState {
    pub variant: Variant,
    pub support: SupportSet,
    pub gaussian: GaussianState,
    pub kernel: KernelConfig,
    /// Per-particle means, one column per particle, when the representation is particle-specific.
    pub particle_means: Option<DMatrix<f64>>,
    proxy: Option<ProxyInfo>,
}

/// Everything the update needs after propagation, and what the diagnostics replay.
#[derive(Debug, Clone)]
pub struct Propagation {
    pub support: SupportSet,
    pub pre: GaussianState,
    pub g: DMatrix<f64>,
    pub r_eff: DMatrix<f64>,
    /// `A_t`, mapping the previous support onto the new one; `None` when the previous
    /// support was empty.
    pub transition: Option<DMatrix<f64>>,
    pub particle_pre: Option<DMatrix<f64>>,
    proxy: Option<ProxyInfo>,
}

fn selection(rows: &[usize], n: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(rows.len(), n);
    for (k, &r) in rows.iter().enumerate() {
        g[(k, r)] = 1.0;
    }
    g
}

/// Indices kept when the support exceeds `cap`: every batch row plus the most recent
/// remaining points.
fn prune_rows(n: usize, batch_rows: &[usize], cap: usize) -> Vec<usize> {
    let mut keep = vec![false; n];
    for &r in batch_rows {
        keep[r] = true;
    }
    let mut count = keep.iter().filter(|k| **k).count();
    for i in (0..n).rev() {
        if count >= cap {
            break;
        }
        if !keep[i] {
            keep[i] = true;
            count += 1;
        }
    }
    (0..n).filter(|&i| keep[i]).collect()
}

fn select_sym(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows.len(), |i, j| m[(rows[i], rows[j])])
}

fn select_rows_vec(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&r| v[r]))
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |i, j| m[(rows[i], j)])
}

/// Gaussian obtained by conditioning the zero-mean prior `K` on proxy information
/// `(Π, b)`: `C = (K⁻¹ + Π)⁻¹`, `m = C b`, evaluated through a low-rank factor of `Π`
/// so that `K` is never inverted.
fn decode_info(k: &DMatrix<f64>, proxy: &ProxyInfo) -> Result<GaussianState> {
    let n = k.nrows();
    let mut pi = proxy.precision.clone();
    symmetrize(&mut pi);
    let eig = SymmetricEigen::new(pi);
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(*v));
    let keep: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > 1e-14 * top && top > 0.0).collect();
    if keep.is_empty() {
        return GaussianState::new(DVector::zeros(n), k.clone());
    }
    let mut u = DMatrix::zeros(n, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        u.set_column(c, &(eig.eigenvectors.column(i) * eig.eigenvalues[i].sqrt()));
    }
    let ku = k * &u;
    let mut inner = u.transpose() * &ku;
    for i in 0..inner.nrows() {
        inner[(i, i)] += 1.0;
    }
    let f = PdFactor::new(&inner, "proxy conditioning")?;
    let v = f.solve_lower(&ku.transpose());
    let cov = repair_psd_against(&(k - v.transpose() * &v), k.trace(), "proxy-conditioned covariance")?;
    let mean = &cov * &proxy.info;
    GaussianState::new(mean, cov)
}

/// `(C⁻¹ - K⁻¹, C⁻¹ m)` with small negative eigenvalues clipped to zero.
fn encode_info(state: &GaussianState, k: &DMatrix<f64>) -> Result<ProxyInfo> {
    let cinv = PdFactor::new(&state.covariance, "proxy encoding: posterior covariance")?.inverse();
    let kinv = PdFactor::new(k, "proxy encoding: prior kernel")?.inverse();
    let mut diff = &cinv - kinv;
    symmetrize(&mut diff);
    let tol = PROXY_TOL * cinv.trace().abs();
    let eig = SymmetricEigen::new(diff);
    let lmin = eig.eigenvalues.min();
    if lmin < -tol {
        return Err(BrpcError::numerical(
            "proxy encoding",
            format!("proxy precision has eigenvalue {lmin:.3e} below tolerance {:.3e}", -tol),
        ));
    }
    let clipped = eig.eigenvalues.map(|v| if v > tol { v } else { 0.0 });
    let mut precision = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&mut precision);
    Ok(ProxyInfo {
        precision,
        info: cinv * &state.mean,
    })
}

/// Proxy on the `keep` rows whose conditioning reproduces the marginal of the full
/// proxy-conditioned posterior. The dropped values are integrated out through their
/// GP conditional `f_d = B f_k + e`, `e ~ N(0, Q_dd)`.
fn marginalize_proxy(
    proxy: &ProxyInfo,
    support: &SupportSet,
    keep: &[usize],
    kernel: &KernelConfig,
) -> Result<ProxyInfo> {
    let drop: Vec<usize> = (0..support.len()).filter(|i| keep.binary_search(i).is_err()).collect();
    if drop.is_empty() {
        return Ok(proxy.clone());
    }
    let (b, qdd) = gp_condition(&support.select(keep), &support.select(&drop), kernel)?;
    let order: Vec<usize> = keep.iter().chain(&drop).copied().collect();
    let pi = select_sym(&proxy.precision, &order);
    let info = select_rows_vec(&proxy.info, &order);
    let (nk, nd) = (keep.len(), drop.len());
    let eig = SymmetricEigen::new(qdd);
    let ld = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    let pil = pi.columns(nk, nd) * &ld;
    let mut m = ld.transpose() * &pil.rows(nk, nd);
    for i in 0..nd {
        m[(i, i)] += 1.0;
    }
    symmetrize(&mut m);
    let f = PdFactor::new(&m, "proxy marginalization")?;
    let w = f.solve_lower(&pil.transpose());
    let pi_t = &pi - w.transpose() * &w;
    let info_t = &info - &pil * f.solve_vec(&(ld.transpose() * info.rows(nk, nd)));
    let mut t = DMatrix::zeros(nk + nd, nk);
    t.view_mut((0, 0), (nk, nk)).fill_with_identity();
    t.view_mut((nk, 0), (nd, nk)).copy_from(&b);
    let mut precision = t.transpose() * pi_t * &t;
    symmetrize(&mut precision);
    Ok(ProxyInfo {
        precision,
        info: t.transpose() * info_t,
    })
}

impl DiscrepancyState {
    /// Zero-mean prior state before any data. `particles` sets the number of
    /// particle-specific means when that representation is selected.
    pub fn fresh(cfg: &DiscrepancyUpdateConfig, input_dim: usize, particles: usize) -> Result<Self> {
        cfg.validate()?;
        let (support, gaussian) = match cfg.variant {
            Variant::F => {
                let z = fixed_support(cfg.fixed_support_size, input_dim);
                let k = gram(&z, &cfg.kernel);
                (z, GaussianState::new(DVector::zeros(k.nrows()), k)?)
            }
            Variant::E | Variant::P => (SupportSet::empty(input_dim), GaussianState::empty()),
        };
        let particle_means = match cfg.representation {
            Representation::Shared => None,
            Representation::ParticleSpecific => Some(DMatrix::zeros(support.len(), particles)),
        };
        let proxy = (cfg.variant == Variant::P).then(|| ProxyInfo::empty(0));
        Ok(DiscrepancyState {
            variant: cfg.variant,
            support,
            gaussian,
            kernel: cfg.kernel,
            particle_means,
            proxy,
        })
    }

    /// Wraps an existing posterior; variant-P states derive their proxy from it.
    pub fn from_parts(
        variant: Variant,
        support: SupportSet,
        gaussian: GaussianState,
        kernel: KernelConfig,
    ) -> Result<Self> {
        if gaussian.dim() != support.len() {
            return Err(BrpcError::invalid(format!(
                "Gaussian of dimension {} on a support of {} points",
                gaussian.dim(),
                support.len()
            )));
        }
        let proxy = match variant {
            Variant::P if support.is_empty() => Some(ProxyInfo::empty(0)),
            Variant::P => Some(encode_info(&gaussian, &gram(&support, &kernel))?),
            _ => None,
        };
        Ok(DiscrepancyState {
            variant,
            support,
            gaussian,
            kernel,
            particle_means: None,
            proxy,
        })
    }

    pub fn is_particle_specific(&self) -> bool {
        self.particle_means.is_some()
    }

    /// Reorders particle-specific means after resampling.
    pub fn resample_particles(&mut self, ancestors: &[usize]) {
        if let Some(m) = &self.particle_means {
            let mut out = DMatrix::zeros(m.nrows(), ancestors.len());
            for (j, &a) in ancestors.iter().enumerate() {
                out.set_column(j, &m.column(a));
            }
            self.particle_means = Some(out);
        }
    }

    /// Swaps the kernel of a variant-P state and re-conditions the carried proxy on it.
    pub fn refresh_kernel(&mut self, kernel: KernelConfig) -> Result<()> {
        kernel.validate()?;
        let proxy = self
            .proxy
            .as_ref()
            .ok_or_else(|| BrpcError::invalid("only variant P can re-condition under a new kernel"))?;
        self.kernel = kernel;
        if !self.support.is_empty() {
            self.gaussian = decode_info(&gram(&self.support, &kernel), proxy)?;
        }
        Ok(())
    }

    /// Propagates to a support that can host `new_inputs` and builds the observation
    /// operator for them.
    pub fn propagate_state(&self, new_inputs: &SupportSet, cfg: &DiscrepancyUpdateConfig) -> Result<Propagation> {
        let k_t = new_inputs.len();
        let noise = DMatrix::from_diagonal_element(k_t, k_t, cfg.noise_var());
        match self.variant {
            Variant::F => {
                let mut p = self.gaussian.covariance.clone();
                if cfg.inflation_sd > 0.0 {
                    for i in 0..p.nrows() {
                        p[(i, i)] += cfg.inflation_sd * cfg.inflation_sd;
                    }
                }
                let (g, q) = gp_condition(&self.support, new_inputs, &self.kernel)?;
                let n = self.support.len();
                Ok(Propagation {
                    support: self.support.clone(),
                    pre: GaussianState::new(self.gaussian.mean.clone(), p)?,
                    g,
                    r_eff: noise + q,
                    transition: Some(DMatrix::identity(n, n)),
                    particle_pre: self.particle_means.clone(),
                    proxy: None,
                })
            }
            Variant::E => {
                let (merged, rows) = self.support.merge_dedup(new_inputs, DEDUP_TOL)?;
                let (mut pre, mut transition, mut particle_pre) = if self.support.is_empty() {
                    let k = gram(&merged, &self.kernel);
                    let pm = self.particle_means.as_ref().map(|m| DMatrix::zeros(merged.len(), m.ncols()));
                    (GaussianState::new(DVector::zeros(merged.len()), k)?, None, pm)
                } else {
                    let (a, q) = gp_condition(&self.support, &merged, &self.kernel)?;
                    let mean = &a * &self.gaussian.mean;
                    let cov = repair_psd(&(q + &a * &self.gaussian.covariance * a.transpose()), "propagated covariance")?;
                    let pm = self.particle_means.as_ref().map(|m| &a * m);
                    (GaussianState::new(mean, cov)?, Some(a), pm)
                };
                let (support, rows) = if merged.len() > cfg.max_support {
                    let keep = prune_rows(merged.len(), &rows, cfg.max_support);
                    pre = GaussianState::new(select_rows_vec(&pre.mean, &keep), select_sym(&pre.covariance, &keep))?;
                    transition = transition.map(|a| select_rows(&a, &keep));
                    particle_pre = particle_pre.map(|m| select_rows(&m, &keep));
                    let remap: Vec<usize> = rows.iter().map(|r| keep.binary_search(r).expect("batch rows are kept")).collect();
                    (merged.select(&keep), remap)
                } else {
                    (merged, rows)
                };
                Ok(Propagation {
                    g: selection(&rows, support.len()),
                    support,
                    pre,
                    r_eff: noise,
                    transition,
                    particle_pre,
                    proxy: None,
                })
            }
            Variant::P => {
                let carried = self.proxy.as_ref().expect("variant P carries a proxy");
                let (merged, rows) = self.support.merge_dedup(new_inputs, DEDUP_TOL)?;
                let k = gram(&merged, &self.kernel);
                let mut proxy = carried.extended(merged.len());
                let mut pre = decode_info(&k, &proxy)?;
                let (support, rows) = if merged.len() > cfg.max_support {
                    let keep = prune_rows(merged.len(), &rows, cfg.max_support);
                    pre = GaussianState::new(select_rows_vec(&pre.mean, &keep), select_sym(&pre.covariance, &keep))?;
                    proxy = marginalize_proxy(&proxy, &merged, &keep, &self.kernel)?;
                    let remap: Vec<usize> = rows.iter().map(|r| keep.binary_search(r).expect("batch rows are kept")).collect();
                    (merged.select(&keep), remap)
                } else {
                    (merged, rows)
                };
                Ok(Propagation {
                    g: selection(&rows, support.len()),
                    support,
                    pre,
                    r_eff: noise,
                    transition: None,
                    particle_pre: None,
                    proxy: Some(proxy),
                })
            }
        }
    }

    /// Propagates and assimilates one residual batch. `particle_residuals` (one column
    /// per particle) is required in the particle-specific representation.
    pub fn update(
        &self,
        batch: &ResidualBatch,
        particle_residuals: Option<&DMatrix<f64>>,
        cfg: &DiscrepancyUpdateConfig,
    ) -> Result<(DiscrepancyState, Propagation)> {
        let prop = self.propagate_state(&batch.inputs, cfg)?;
        let eta = cfg.eta_delta;
        let (gaussian, proxy) = match &prop.proxy {
            Some(carried) => {
                let rinv = PdFactor::new(&prop.r_eff, "residual covariance")?;
                let gt_rinv = rinv.solve(&prop.g).transpose();
                let proxy = ProxyInfo {
                    precision: &carried.precision + (&gt_rinv * &prop.g) * eta,
                    info: &carried.info + (&gt_rinv * &batch.residuals) * eta,
                };
                (decode_info(&gram(&prop.support, &self.kernel), &proxy)?, Some(proxy))
            }
            None => (assimilate(&prop.pre, &prop.g, &prop.r_eff, &batch.residuals, eta)?, None),
        };
        let particle_means = match (&prop.particle_pre, particle_residuals) {
            (Some(pre_means), Some(res)) => Some(assimilate_means(&prop.pre, &prop.g, &prop.r_eff, pre_means, res, eta)?),
            (Some(_), None) => {
                return Err(BrpcError::invalid("particle-specific update needs per-particle residuals"))
            }
            (None, _) => None,
        };
        let next = DiscrepancyState {
            variant: self.variant,
            support: prop.support.clone(),
            gaussian,
            kernel: self.kernel,
            particle_means,
            proxy,
        };
        Ok((next, prop))
    }
}

fn gain(pre: &GaussianState, g: &DMatrix<f64>, r_eff: &DMatrix<f64>, eta: f64) -> Result<DMatrix<f64>> {
    let pg = &pre.covariance * g.transpose();
    let mut s = g * &pg + r_eff / eta;
    symmetrize(&mut s);
    let f = PdFactor::new(&s, "innovation covariance")?;
    Ok(f.solve(&pg.transpose()).transpose())
}

/// Tempered Gaussian update with precision `P⁻¹ + η GᵀR⁻¹G` and information vector
/// `P⁻¹a + η GᵀR⁻¹r`, evaluated in covariance form so a singular `P` is allowed.
pub fn assimilate(
    pre: &GaussianState,
    g: &DMatrix<f64>,
    r_eff: &DMatrix<f64>,
    r: &DVector<f64>,
    eta_delta: f64,
) -> Result<GaussianState> {
    check_dims(pre, g, r_eff, r.len())?;
    if !(eta_delta >= 0.0) {
        return Err(BrpcError::invalid("eta_delta must be nonnegative"));
    }
    if eta_delta == 0.0 || g.nrows() == 0 {
        return Ok(pre.clone());
    }
    let k = gain(pre, g, r_eff, eta_delta)?;
    let mean = &pre.mean + &k * (r - g * &pre.mean);
    let cov = repair_psd_against(&(&pre.covariance - &k * g * &pre.covariance), pre.covariance.trace(), "posterior covariance")?;
    GaussianState::new(mean, cov)
}

fn assimilate_means(
    pre: &GaussianState,
    g: &DMatrix<f64>,
    r_eff: &DMatrix<f64>,
    means: &DMatrix<f64>,
    residuals: &DMatrix<f64>,
    eta: f64,
) -> Result<DMatrix<f64>> {
    if residuals.nrows() != g.nrows() || residuals.ncols() != means.ncols() {
        return Err(BrpcError::invalid("per-particle residuals do not match the batch and particle count"));
    }
    let k = gain(pre, g, r_eff, eta)?;
    Ok(means + &k * (residuals - g * means))
}

fn check_dims(pre: &GaussianState, g: &DMatrix<f64>, r_eff: &DMatrix<f64>, k: usize) -> Result<()> {
    if g.ncols() != pre.dim() || g.nrows() != k || r_eff.nrows() != k || r_eff.ncols() != k {
        return Err(BrpcError::invalid(format!(
            "update dimensions: state {}, operator {}x{}, noise {}x{}, residuals {k}",
            pre.dim(),
            g.nrows(),
            g.ncols(),
            r_eff.nrows(),
            r_eff.ncols()
        )));
    }
    Ok(())
}

/// Offline refit on the segment since the last restart, with every batch's residual
/// recomputed against the current cloud.
pub fn rra_refit(
    segment: &[Batch],
    cloud: &ParticleCloud,
    sim: &SimulatorSpec,
    cfg: &DiscrepancyUpdateConfig,
) -> Result<DiscrepancyState> {
    if segment.is_empty() {
        return Err(BrpcError::invalid("residual re-anchoring needs a nonempty segment"));
    }
    let dim = segment[0].inputs.dim();
    let mut inputs = SupportSet::empty(dim);
    let mut resid = Vec::new();
    let mut per_particle = Vec::new();
    for b in segment {
        let r = shared_residual(b, cloud, sim);
        for p in r.inputs.iter() {
            inputs.push(p)?;
        }
        resid.extend(r.residuals.iter());
        if cfg.representation == Representation::ParticleSpecific {
            per_particle.push(particle_residuals(b, cloud, sim));
        }
    }
    let limit = match cfg.variant {
        Variant::F => cfg.rra_window,
        Variant::E | Variant::P => cfg.rra_window.min(cfg.max_support),
    };
    let (inputs, start) = inputs.keep_last(limit);
    let residuals = DVector::from_column_slice(&resid[start..]);
    let particle = (!per_particle.is_empty()).then(|| {
        let total: usize = per_particle.iter().map(|m| m.nrows()).sum();
        let mut stacked = DMatrix::zeros(total, cloud.len());
        let mut row = 0;
        for m in &per_particle {
            stacked.view_mut((row, 0), (m.nrows(), m.ncols())).copy_from(m);
            row += m.nrows();
        }
        stacked.rows(start, total - start).into_owned()
    });
    let batch = ResidualBatch {
        inputs,
        residuals,
        source: ResidualSource::RraSegment,
    };
    let offline = DiscrepancyUpdateConfig {
        eta_delta: 1.0,
        ..cfg.clone()
    };
    let fresh = DiscrepancyState::fresh(&offline, dim, cloud.len())?;
    Ok(fresh.update(&batch, particle.as_ref(), &offline)?.0)
}

/// Predictive law of `Y(X*)`: one Gaussian per particle with mean
/// `y_s(X*, θ_i) + G* m` and the shared covariance `Q* + G* C G*ᵀ + σ²I`.
pub fn predictive_law(
    state: &DiscrepancyState,
    cloud: &ParticleCloud,
    x_star: &SupportSet,
    sim: &SimulatorSpec,
    noise_sd: f64,
) -> Result<GaussianMixture> {
    let k = x_star.len();
    let (shifts, mut cov): (Vec<DVector<f64>>, DMatrix<f64>) = if state.support.is_empty() {
        (vec![DVector::zeros(k); cloud.len()], gram(x_star, &state.kernel))
    } else {
        let (g, q) = gp_condition(&state.support, x_star, &state.kernel)?;
        let cov = q + &g * &state.gaussian.covariance * g.transpose();
        let shifts = match &state.particle_means {
            Some(m) => {
                let gm = &g * m;
                (0..cloud.len()).map(|i| gm.column(i).into_owned()).collect()
            }
            None => vec![&g * &state.gaussian.mean; cloud.len()],
        };
        (shifts, cov)
    };
    for i in 0..k {
        cov[(i, i)] += noise_sd * noise_sd;
    }
    symmetrize(&mut cov);
    let means = cloud
        .particles()
        .zip(shifts)
        .map(|(p, s)| sim.eval_batch(x_star, p) + s)
        .collect();
    GaussianMixture::new(cloud.weights().to_vec(), means, MixtureCovariance::Shared(cov))
}

/// Proxy observations `(ỹ, Λ)` whose conditioning of the prior reproduces a state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyObservations {
    pub support: SupportSet,
    pub values: DVector<f64>,
    pub noise_cov: DMatrix<f64>,
}

/// `Λ⁻¹ = C⁻¹ - K⁻¹`, `ỹ = Λ C⁻¹ m`. Small negative eigenvalues of `Λ⁻¹` are floored
/// at `1e-10`; a state carrying no information gives an empty proxy set.
pub fn proxy_encode(state: &DiscrepancyState) -> Result<ProxyObservations> {
    let dim = state.support.dim();
    if state.support.is_empty() {
        return Ok(ProxyObservations {
            support: SupportSet::empty(dim),
            values: DVector::zeros(0),
            noise_cov: DMatrix::zeros(0, 0),
        });
    }
    let k = gram(&state.support, &state.kernel);
    let cinv = PdFactor::new(&state.gaussian.covariance, "proxy encoding: posterior covariance")?.inverse();
    let kinv = PdFactor::new(&k, "proxy encoding: prior kernel")?.inverse();
    let mut diff = &cinv - kinv;
    symmetrize(&mut diff);
    let tol = PROXY_TOL * cinv.trace().abs();
    let eig = SymmetricEigen::new(diff);
    let lmin = eig.eigenvalues.min();
    let lmax = eig.eigenvalues.max();
    if lmin < -tol {
        return Err(BrpcError::numerical(
            "proxy encoding",
            format!("C⁻¹ - K⁻¹ has eigenvalue {lmin:.3e}, beyond the clipping tolerance {:.3e}", -tol),
        ));
    }
    if lmax <= tol {
        return Ok(ProxyObservations {
            support: SupportSet::empty(dim),
            values: DVector::zeros(0),
            noise_cov: DMatrix::zeros(0, 0),
        });
    }
    let inv_eig = eig.eigenvalues.map(|v| 1.0 / v.max(PROXY_FLOOR));
    let mut lambda = &eig.eigenvectors * DMatrix::from_diagonal(&inv_eig) * eig.eigenvectors.transpose();
    symmetrize(&mut lambda);
    let values = &lambda * (cinv * &state.gaussian.mean);
    Ok(ProxyObservations {
        support: state.support.clone(),
        values,
        noise_cov: lambda,
    })
}

/// Conditions the zero-mean prior on `support` on the proxy observations.
pub fn proxy_decode(proxy: &ProxyObservations, support: &SupportSet, kernel: &KernelConfig) -> Result<GaussianState> {
    let k = gram(support, kernel);
    if proxy.support.is_empty() {
        return GaussianState::new(DVector::zeros(support.len()), k);
    }
    if proxy.support != *support {
        return Err(BrpcError::invalid("proxy observations live on a different support"));
    }
    let mut s = &k + &proxy.noise_cov;
    symmetrize(&mut s);
    let f = PdFactor::new(&s, "proxy decoding")?;
    let v = f.solve_lower(&k);
    let cov = repair_psd_against(&(&k - v.transpose() * &v), k.trace(), "proxy-decoded covariance")?;
    let mean = &k * f.solve_vec(&proxy.values);
    GaussianState::new(mean, cov)
}
