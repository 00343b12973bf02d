//! Squared-exponential kernels, Gaussian conditioning and positive-definite solves.
//!
//! Every linear solve in the crate goes through [`PdFactor`], a thin wrapper over a
//! Cholesky factorization that reports a condition estimate when the factorization
//! fails. Covariances produced by subtraction (Schur complements, propagated
//! covariances) are passed through [`repair_psd`] before they are stored.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{BrpcError, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Relative size of a negative eigenvalue that [`repair_psd`] will silently clip.
pub const PSD_REPAIR_TOL: f64 = 1e-6;

/// Squared-exponential kernel `σ² exp(-‖a-b‖² / 2ℓ²)` plus a nugget wherever two points coincide.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub signal_variance: f64,
    pub lengthscale: f64,
    pub jitter: f64,
}

impl KernelConfig {
    /// Kernel with the default nugget of `1e-8 * signal_variance`.
    pub fn new(signal_variance: f64, lengthscale: f64) -> Result<Self> {
        Self::with_jitter(signal_variance, lengthscale, 1e-8 * signal_variance)
    }

    pub fn with_jitter(signal_variance: f64, lengthscale: f64, jitter: f64) -> Result<Self> {
        let cfg = KernelConfig {
            signal_variance,
            lengthscale,
            jitter,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(BrpcError::invalid(format!(
                "kernel signal variance must be positive, got {}",
                self.signal_variance
            )));
        }
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(BrpcError::invalid(format!(
                "kernel lengthscale must be positive, got {}",
                self.lengthscale
            )));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(BrpcError::invalid(format!(
                "kernel jitter must be nonnegative, got {}",
                self.jitter
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.signal_variance * (-0.5 * d2 / (self.lengthscale * self.lengthscale)).exp()
    }
}

/// Ordered set of input locations stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportSet {
    dim: usize,
    coords: Vec<f64>,
}

impl SupportSet {
    pub fn empty(dim: usize) -> Self {
        SupportSet {
            dim,
            coords: Vec::new(),
        }
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map_or(0, |p| p.len());
        let mut set = SupportSet::empty(dim);
        for p in points {
            set.push(p)?;
        }
        Ok(set)
    }

    pub fn from_scalars(xs: &[f64]) -> Self {
        SupportSet {
            dim: 1,
            coords: xs.to_vec(),
        }
    }

    /// Builds a set from `n * dim` row-major coordinates.
    pub fn from_flat(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 || coords.len() % dim != 0 {
            return Err(BrpcError::invalid(format!(
                "{} coordinates cannot be split into points of dimension {dim}",
                coords.len()
            )));
        }
        Ok(SupportSet { dim, coords })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.coords.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.coords.chunks_exact(self.dim.max(1))
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn push(&mut self, p: &[f64]) -> Result<()> {
        if self.coords.is_empty() && self.dim == 0 {
            self.dim = p.len();
        }
        if p.len() != self.dim || p.is_empty() {
            return Err(BrpcError::invalid(format!(
                "point of dimension {} added to support of dimension {}",
                p.len(),
                self.dim
            )));
        }
        self.coords.extend_from_slice(p);
        Ok(())
    }

    /// Appends the points of `other` that are farther than `tol` from every existing
    /// point. Returns the merged set and, for every point of `other`, its row in the
    /// merged set.
    pub fn merge_dedup(&self, other: &SupportSet, tol: f64) -> Result<(SupportSet, Vec<usize>)> {
        if !self.is_empty() && !other.is_empty() && self.dim != other.dim {
            return Err(BrpcError::invalid(format!(
                "cannot merge supports of dimension {} and {}",
                self.dim, other.dim
            )));
        }
        let mut merged = self.clone();
        let mut rows = Vec::with_capacity(other.len());
        let tol2 = tol * tol;
        for p in other.iter() {
            let hit = merged.iter().position(|q| {
                q.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() <= tol2
            });
            match hit {
                Some(i) => rows.push(i),
                None => {
                    merged.push(p)?;
                    rows.push(merged.len() - 1);
                }
            }
        }
        Ok((merged, rows))
    }

    /// Keeps the most recent `n` points; returns the index of the first kept point.
    pub fn keep_last(&self, n: usize) -> (SupportSet, usize) {
        let start = self.len().saturating_sub(n);
        (self.select_range(start, self.len()), start)
    }

    pub fn select_range(&self, start: usize, end: usize) -> SupportSet {
        SupportSet {
            dim: self.dim,
            coords: self.coords[start * self.dim..end * self.dim].to_vec(),
        }
    }

    pub fn select(&self, rows: &[usize]) -> SupportSet {
        let mut coords = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            coords.extend_from_slice(self.point(r));
        }
        SupportSet { dim: self.dim, coords }
    }

    pub fn concat(sets: &[&SupportSet]) -> Result<SupportSet> {
        let dim = sets.iter().map(|s| s.dim).find(|&d| d > 0).unwrap_or(0);
        let mut out = SupportSet::empty(dim);
        for s in sets {
            for p in s.iter() {
                out.push(p)?;
            }
        }
        Ok(out)
    }
}

/// Cross-covariance matrix between two supports. The nugget acts as latent white
/// noise, so it is added wherever two points coincide.
pub fn kernel_matrix(a: &SupportSet, b: &SupportSet, cfg: &KernelConfig) -> Result<DMatrix<f64>> {
    if !a.is_empty() && !b.is_empty() && a.dim() != b.dim() {
        return Err(BrpcError::invalid(format!(
            "kernel between points of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let same = std::ptr::eq(a, b);
    let mut k = DMatrix::zeros(a.len(), b.len());
    if same {
        for i in 0..a.len() {
            for j in 0..i {
                let v = cfg.eval(a.point(i), a.point(j));
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] = cfg.signal_variance + cfg.jitter;
        }
    } else {
        for j in 0..b.len() {
            let bj = b.point(j);
            for i in 0..a.len() {
                let ai = a.point(i);
                k[(i, j)] = cfg.eval(ai, bj);
                if ai == bj {
                    k[(i, j)] += cfg.jitter;
                }
            }
        }
    }
    Ok(k)
}

/// Self-gram with nugget.
pub fn gram(a: &SupportSet, cfg: &KernelConfig) -> DMatrix<f64> {
    kernel_matrix(a, a, cfg).expect("a support always matches its own dimension")
}

/// Gaussian in moment form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianState {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianState {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(BrpcError::invalid(format!(
                "mean of length {} with covariance {}x{}",
                mean.len(),
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        Ok(GaussianState { mean, covariance })
    }

    pub fn empty() -> Self {
        GaussianState {
            mean: DVector::zeros(0),
            covariance: DMatrix::zeros(0, 0),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Precision `J = Σ⁻¹` and information vector `h = J μ`.
    pub fn information_form(&self) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let f = PdFactor::new(&self.covariance, "information form")?;
        let j = f.inverse();
        let h = &j * &self.mean;
        Ok((j, h))
    }
}

/// Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct PdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl PdFactor {
    pub fn new(m: &DMatrix<f64>, context: &str) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(BrpcError::invalid(format!(
                "{context}: non-square matrix {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(BrpcError::numerical(context, "matrix has non-finite entries"));
        }
        match Cholesky::new(m.clone()) {
            Some(chol) => Ok(PdFactor { chol }),
            None => Err(BrpcError::numerical(
                context,
                format!(
                    "matrix is not positive definite (condition estimate {:.3e})",
                    condition_estimate(m)
                ),
            )),
        }
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `L⁻¹ b` for the lower factor `L`.
    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a nonzero diagonal")
    }

    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a nonzero diagonal")
    }

    /// `L⁻ᵀ b`.
    pub fn solve_upper(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .tr_solve_lower_triangular(b)
            .expect("Cholesky factor has a nonzero diagonal")
    }

    pub fn lower(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        symmetrize(&mut inv);
        inv
    }

    /// Squared Mahalanobis norm `vᵀ Σ⁻¹ v`.
    pub fn quad_form(&self, v: &DVector<f64>) -> f64 {
        self.solve_lower_vec(v).norm_squared()
    }
}

/// Ratio of extreme eigenvalue magnitudes; used only for error messages.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() || m.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s).eigenvalues;
    let max = eig.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Symmetrizes `m` and clips small negative eigenvalues to zero. Violations larger
/// than `PSD_REPAIR_TOL * trace` are reported as errors.
pub fn repair_psd(m: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    repair_psd_against(m, m.trace().abs(), context)
}

/// As [`repair_psd`], with the tolerance measured against `scale`, typically the
/// trace of the matrix a difference was taken from.
pub fn repair_psd_against(m: &DMatrix<f64>, scale: f64, context: &str) -> Result<DMatrix<f64>> {
    let mut s = m.clone();
    symmetrize(&mut s);
    if s.nrows() == 0 || Cholesky::new(s.clone()).is_some() {
        return Ok(s);
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(BrpcError::numerical(context, "covariance has non-finite entries"));
    }
    let trace = s.trace().abs().max(scale);
    let eig = SymmetricEigen::new(s);
    let lmin = eig.eigenvalues.min();
    if lmin < -PSD_REPAIR_TOL * trace {
        return Err(BrpcError::numerical(
            context,
            format!("covariance has eigenvalue {lmin:.3e} against scale {trace:.3e}"),
        ));
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let mut out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// GP conditional-mean operator `A = K_{new,prior} K_{prior}⁻¹` and Schur-complement
/// covariance `Q = K_{new} - K_{new,prior} K_{prior}⁻¹ K_{prior,new}`.
pub fn gp_condition(
    prior_support: &SupportSet,
    new_support: &SupportSet,
    cfg: &KernelConfig,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if prior_support.is_empty() {
        return Err(BrpcError::invalid("gp_condition needs a nonempty prior support"));
    }
    let kpp = gram(prior_support, cfg);
    let kpn = kernel_matrix(prior_support, new_support, cfg)?;
    let knn = gram(new_support, cfg);
    let f = PdFactor::new(&kpp, "prior kernel matrix")?;
    let v = f.solve_lower(&kpn);
    let scale = knn.trace();
    let q = knn - v.transpose() * &v;
    let a = f.solve_upper(&v).transpose();
    let q = repair_psd_against(&q, scale, "conditional covariance")?;
    Ok((a, q))
}

/// Exact multivariate normal log-density.
pub fn gaussian_logpdf(y: &DVector<f64>, state: &GaussianState) -> Result<f64> {
    if y.len() != state.dim() {
        return Err(BrpcError::invalid(format!(
            "observation of length {} against Gaussian of dimension {}",
            y.len(),
            state.dim()
        )));
    }
    let f = PdFactor::new(&state.covariance, "Gaussian log-density")?;
    let resid = y - &state.mean;
    Ok(logpdf_with_factor(&resid, &f))
}

/// Log-density of a zero-mean Gaussian at `resid` given the covariance factor.
pub fn logpdf_with_factor(resid: &DVector<f64>, f: &PdFactor) -> f64 {
    let n = resid.len() as f64;
    -0.5 * (n * LN_2PI + f.log_det() + f.quad_form(resid))
}

/// `log Σ exp(v)` with the usual max shift; returns `-inf` when every entry is `-inf`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn kernel_entry_values() {
        let cfg = KernelConfig::with_jitter(0.01, 1.0, 0.0).unwrap();
        let a = SupportSet::from_scalars(&[0.3]);
        assert_relative_eq!(kernel_matrix(&a, &a, &cfg).unwrap()[(0, 0)], 0.01);

        let cfg = KernelConfig::with_jitter(1.0, 1.0, 0.0).unwrap();
        let a = SupportSet::from_scalars(&[0.0]);
        let b = SupportSet::from_scalars(&[1.0]);
        assert_relative_eq!(kernel_matrix(&a, &b, &cfg).unwrap()[(0, 0)], (-0.5f64).exp());
    }

    #[test]
    fn jitter_on_coincident_points_only() {
        let cfg = KernelConfig::with_jitter(1.0, 0.5, 0.25).unwrap();
        let a = SupportSet::from_scalars(&[0.1, 0.7]);
        let b = SupportSet::from_scalars(&[0.7, 0.3]);
        assert_relative_eq!(kernel_matrix(&a, &a, &cfg).unwrap()[(1, 1)], 1.25);
        assert_relative_eq!(kernel_matrix(&a, &b, &cfg).unwrap()[(1, 0)], 1.25);
        assert_relative_eq!(kernel_matrix(&a, &b, &cfg).unwrap()[(0, 1)], cfg.eval(&[0.1], &[0.3]));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let cfg = KernelConfig::new(1.0, 1.0).unwrap();
        let a = SupportSet::from_scalars(&[0.0]);
        let b = SupportSet::from_points(&[vec![0.0, 1.0]]).unwrap();
        assert!(matches!(kernel_matrix(&a, &b, &cfg), Err(BrpcError::InvalidInput(_))));
    }

    #[test]
    fn bad_kernel_config() {
        assert!(KernelConfig::new(0.0, 1.0).is_err());
        assert!(KernelConfig::new(1.0, -1.0).is_err());
        assert!(KernelConfig::with_jitter(1.0, 1.0, -1e-3).is_err());
    }

    #[test]
    fn condition_on_itself() {
        let cfg = KernelConfig::new(1.0, 0.4).unwrap();
        let s = SupportSet::from_scalars(&[0.0, 0.35, 0.9]);
        let (a, q) = gp_condition(&s, &s, &cfg).unwrap();
        assert!((a - DMatrix::identity(3, 3)).abs().max() < 1e-6);
        assert!(q.abs().max() < 1e-8);
    }

    #[test]
    fn condition_far_point() {
        let cfg = KernelConfig::new(2.0, 0.1).unwrap();
        let p = SupportSet::from_scalars(&[0.0]);
        let n = SupportSet::from_scalars(&[50.0]);
        let (a, q) = gp_condition(&p, &n, &cfg).unwrap();
        assert!(a[(0, 0)].abs() < 1e-12);
        assert_relative_eq!(q[(0, 0)], 2.0, max_relative = 1e-6);
    }

    #[test]
    fn empty_prior_support_rejected() {
        let cfg = KernelConfig::new(1.0, 1.0).unwrap();
        let e = SupportSet::empty(1);
        let n = SupportSet::from_scalars(&[0.0]);
        assert!(gp_condition(&e, &n, &cfg).is_err());
    }

    #[test]
    fn logpdf_standard_normal_mode() {
        let s = GaussianState::new(DVector::from_vec(vec![0.7]), DMatrix::identity(1, 1)).unwrap();
        let y = DVector::from_vec(vec![0.7]);
        assert_relative_eq!(
            gaussian_logpdf(&y, &s).unwrap(),
            -0.5 * (2.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn logpdf_factorizes_for_diagonal() {
        let s = GaussianState::new(
            DVector::zeros(2),
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0])),
        )
        .unwrap();
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let uni = |z: f64, v: f64| -0.5 * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * z * z / v;
        assert_relative_eq!(
            gaussian_logpdf(&y, &s).unwrap(),
            uni(1.0, 1.0) + uni(2.0, 4.0),
            epsilon = 1e-13
        );
    }

    #[test]
    fn logpdf_rejects_indefinite() {
        let s = GaussianState::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
        )
        .unwrap();
        assert!(matches!(
            gaussian_logpdf(&DVector::zeros(2), &s),
            Err(BrpcError::Numerical { .. })
        ));
    }

    #[test]
    fn repair_clips_tiny_negative_and_rejects_large() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-9]);
        let r = repair_psd(&m, "test").unwrap();
        let eig = SymmetricEigen::new(r).eigenvalues;
        assert!(eig.min() >= -1e-15);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(repair_psd(&bad, "test").is_err());
    }

    #[test]
    fn merge_dedup_reuses_rows() {
        let a = SupportSet::from_scalars(&[0.0, 0.5]);
        let b = SupportSet::from_scalars(&[0.5, 0.75, 0.0 + 1e-14]);
        let (m, rows) = a.merge_dedup(&b, 1e-12).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(rows, vec![1, 2, 0]);
    }

    #[test]
    fn log_sum_exp_handles_neg_inf() {
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert_relative_eq!(log_sum_exp(&[0.0, 0.0]), 2f64.ln());
        assert_relative_eq!(log_sum_exp(&[1000.0, 1000.0]), 1000.0 + 2f64.ln());
    }
}
