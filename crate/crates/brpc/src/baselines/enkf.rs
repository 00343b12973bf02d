//! Joint ensemble Kalman filter over `z = (θ, β)`, with the discrepancy written as
//! `b(x)ᵀβ` on an intercept, linear and RBF basis.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::box_center;
use crate::error::{BrpcError, Result};
use crate::gaussian::{PdFactor, SupportSet};
use crate::mixture::{GaussianMixture, MixtureCovariance};
use crate::seed::Rng;
use crate::simulator::SimulatorSpec;
use crate::stream::Batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnkfConfig {
    pub members: usize,
    pub sigma_theta: f64,
    pub sigma_beta: f64,
    pub rho_beta: f64,
    pub inflation: f64,
    pub rbf_centers: usize,
    pub rbf_width: f64,
    pub obs_sd: f64,
    pub bounds: Vec<(f64, f64)>,
    /// Spread of the initial β ensemble.
    pub beta_init_sd: f64,
}

impl Default for EnkfConfig {
    fn default() -> Self {
        EnkfConfig {
            members: 1024,
            sigma_theta: 0.035,
            sigma_beta: 0.015,
            rho_beta: 0.99,
            inflation: 1.02,
            rbf_centers: 6,
            rbf_width: 0.15,
            obs_sd: 0.2,
            bounds: vec![(0.0, 3.0)],
            beta_init_sd: 0.5,
        }
    }
}

impl EnkfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.members < 2 {
            return Err(BrpcError::invalid("EnKF needs at least two members"));
        }
        if !(self.sigma_theta >= 0.0 && self.sigma_beta >= 0.0 && self.beta_init_sd >= 0.0) {
            return Err(BrpcError::invalid("EnKF noise scales must be nonnegative"));
        }
        if !(self.rho_beta > 0.0 && self.rho_beta <= 1.0) {
            return Err(BrpcError::invalid("rho_beta must lie in (0, 1]"));
        }
        if !(self.inflation >= 1.0) || !(self.obs_sd > 0.0) || !(self.rbf_width > 0.0) {
            return Err(BrpcError::invalid("EnKF needs inflation >= 1, obs_sd > 0 and rbf_width > 0"));
        }
        if self.bounds.is_empty() || self.bounds.iter().any(|(lo, hi)| !(hi >= lo)) {
            return Err(BrpcError::invalid("EnKF calibration range must be a nonempty box"));
        }
        Ok(())
    }

    pub fn basis_len(&self) -> usize {
        2 + self.rbf_centers
    }

    /// `(1, x, exp(−(x − c_j)²/(2ℓ_b²)))` with centers equally spaced on [0, 1].
    pub fn basis(&self, x: f64) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.basis_len());
        b.push(1.0);
        b.push(x);
        let m = self.rbf_centers;
        for j in 0..m {
            let c = if m == 1 { 0.5 } else { j as f64 / (m - 1) as f64 };
            b.push((-(x - c).powi(2) / (2.0 * self.rbf_width * self.rbf_width)).exp());
        }
        b
    }

    fn design(&self, x: &SupportSet) -> DMatrix<f64> {
        let q = self.basis_len();
        let mut out = DMatrix::zeros(x.len(), q);
        for (i, p) in x.iter().enumerate() {
            for (j, v) in self.basis(p[0]).into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        out
    }
}

/// Ensemble stored one member per row: θ coordinates first, then β.
#[derive(Debug, Clone)]
pub struct Enkf {
    cfg: EnkfConfig,
    sim: SimulatorSpec,
    members: DMatrix<f64>,
}

impl Enkf {
    pub fn new(cfg: EnkfConfig, sim: SimulatorSpec, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if sim.input_dim != 1 || cfg.bounds.len() != sim.theta_dim {
            return Err(BrpcError::invalid("the EnKF basis is defined for scalar inputs only"));
        }
        let p = sim.theta_dim;
        let q = cfg.basis_len();
        let mut members = DMatrix::zeros(cfg.members, p + q);
        for i in 0..cfg.members {
            for (j, &(lo, hi)) in cfg.bounds.iter().enumerate() {
                members[(i, j)] = lo + (hi - lo) * rng.random::<f64>();
            }
            for j in 0..q {
                let z: f64 = StandardNormal.sample(rng);
                members[(i, p + j)] = cfg.beta_init_sd * z;
            }
        }
        Ok(Enkf { cfg, sim, members })
    }

    pub fn from_members(cfg: EnkfConfig, sim: SimulatorSpec, members: DMatrix<f64>) -> Result<Self> {
        cfg.validate()?;
        if members.nrows() < 2 || members.ncols() != sim.theta_dim + cfg.basis_len() {
            return Err(BrpcError::invalid("ensemble shape does not match the configuration"));
        }
        Ok(Enkf { cfg, sim, members })
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn theta(&self) -> Vec<f64> {
        let p = self.sim.theta_dim;
        if self.members.nrows() == 0 {
            return box_center(&self.cfg.bounds);
        }
        (0..p).map(|j| self.members.column(j).mean()).collect()
    }

    fn predicted(&self, members: &DMatrix<f64>, x: &SupportSet) -> DMatrix<f64> {
        let p = self.sim.theta_dim;
        let design = self.cfg.design(x);
        let mut out = DMatrix::zeros(members.nrows(), x.len());
        for i in 0..members.nrows() {
            let row = members.row(i);
            let theta: Vec<f64> = row.columns(0, p).iter().copied().collect();
            let beta = row.columns(p, self.cfg.basis_len()).transpose();
            let y = self.sim.eval_batch(x, &theta) + &design * beta;
            out.set_row(i, &y.transpose());
        }
        out
    }

    /// Equal-weight mixture of member predictions with observation noise.
    pub fn predict(&self, x: &SupportSet) -> Result<GaussianMixture> {
        let yhat = self.predicted(&self.members, x);
        let n = yhat.nrows();
        let means = (0..n).map(|i| yhat.row(i).transpose()).collect();
        let cov = DMatrix::identity(x.len(), x.len()) * (self.cfg.obs_sd * self.cfg.obs_sd);
        GaussianMixture::new(vec![1.0 / n as f64; n], means, MixtureCovariance::Shared(cov))
    }

    pub fn step(&mut self, batch: &Batch, rng: &mut Rng) -> Result<()> {
        *self = enkf_step(self, batch, rng)?;
        Ok(())
    }

    fn clip_theta(&self, members: &mut DMatrix<f64>) {
        for (j, &(lo, hi)) in self.cfg.bounds.iter().enumerate() {
            members.column_mut(j).apply(|v| *v = v.clamp(lo, hi));
        }
    }
}

/// Forecast by damped random walk, inflate state anomalies, then analyse with
/// perturbed observations.
pub fn enkf_step(ens: &Enkf, batch: &Batch, rng: &mut Rng) -> Result<Enkf> {
    let cfg = &ens.cfg;
    let p = ens.sim.theta_dim;
    let n = ens.members.nrows();
    if n < 2 {
        return Err(BrpcError::invalid("EnKF needs at least two members"));
    }
    let mut z = ens.members.clone();
    for i in 0..n {
        for j in 0..z.ncols() {
            let e: f64 = StandardNormal.sample(rng);
            if j < p {
                z[(i, j)] += cfg.sigma_theta * e;
            } else {
                z[(i, j)] = cfg.rho_beta * z[(i, j)] + cfg.sigma_beta * e;
            }
        }
    }
    ens.clip_theta(&mut z);
    if cfg.inflation != 1.0 {
        let mean = z.row_mean();
        for i in 0..n {
            let a = z.row(i) - &mean;
            z.set_row(i, &(&mean + a * cfg.inflation));
        }
        ens.clip_theta(&mut z);
    }
    let yhat = ens.predicted(&z, &batch.inputs);
    let mut out = enkf_analysis(&z, &yhat, &batch.observations, cfg.obs_sd, rng)?;
    ens.clip_theta(&mut out);
    Ok(Enkf {
        cfg: cfg.clone(),
        sim: ens.sim,
        members: out,
    })
}

/// Perturbed-observation analysis `z_i + K(y + ε_i − ŷ_i)` with the anomaly gain
/// `K = C_zy C_yy⁻¹`. Members are rows of `forecast` and `predicted`.
pub fn enkf_analysis(
    forecast: &DMatrix<f64>,
    predicted: &DMatrix<f64>,
    y: &DVector<f64>,
    obs_sd: f64,
    rng: &mut Rng,
) -> Result<DMatrix<f64>> {
    let n = forecast.nrows();
    if n < 2 || predicted.nrows() != n || predicted.ncols() != y.len() {
        return Err(BrpcError::invalid("ensemble and prediction shapes disagree"));
    }
    let za = anomalies(forecast);
    let ya = anomalies(predicted);
    let scale = 1.0 / (n as f64 - 1.0);
    let czy = za.transpose() * &ya * scale;
    let mut cyy = ya.transpose() * &ya * scale;
    for i in 0..cyy.nrows() {
        cyy[(i, i)] += obs_sd * obs_sd;
    }
    let f = PdFactor::new(&cyy, "EnKF innovation covariance")?;
    let gain_t = f.solve(&czy.transpose());
    let mut innov = DMatrix::zeros(n, y.len());
    for i in 0..n {
        for k in 0..y.len() {
            let e: f64 = StandardNormal.sample(rng);
            innov[(i, k)] = y[k] + obs_sd * e - predicted[(i, k)];
        }
    }
    Ok(forecast + innov * gain_t)
}

fn anomalies(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = m.row_mean();
    let mut out = m.clone();
    for i in 0..m.nrows() {
        let r = m.row(i) - &mean;
        out.set_row(i, &r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use approx::assert_relative_eq;

    fn batch() -> Batch {
        let xs = [0.1, 0.4, 0.7, 0.9];
        let inputs = SupportSet::from_scalars(&xs);
        let y = SimulatorSpec::synthetic1d().eval_batch(&inputs, &[1.4]);
        Batch::new(inputs, y).unwrap()
    }

    #[test]
    fn no_information_leaves_ensemble_in_place() {
        let cfg = EnkfConfig {
            members: 50,
            sigma_theta: 0.0,
            sigma_beta: 0.0,
            rho_beta: 1.0,
            inflation: 1.0,
            obs_sd: 1e9,
            ..EnkfConfig::default()
        };
        let mut rng = rng_from(1);
        let ens = Enkf::new(cfg, SimulatorSpec::synthetic1d(), &mut rng).unwrap();
        let next = enkf_step(&ens, &batch(), &mut rng).unwrap();
        assert_eq!(next.members.shape(), ens.members.shape());
        for (a, b) in next.members.iter().zip(ens.members.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn flat_predictions_give_zero_gain() {
        let mut rng = rng_from(2);
        let z = DMatrix::from_fn(10, 3, |i, j| (i * 3 + j) as f64 * 0.1);
        let yhat = DMatrix::from_element(10, 4, 0.7);
        let y = DVector::from_element(4, 5.0);
        let out = enkf_analysis(&z, &yhat, &y, 0.2, &mut rng).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn scalar_linear_gaussian_matches_kalman() {
        let mut rng = rng_from(4);
        let n = 40_000;
        let (m0, v0, sd): (f64, f64, f64) = (1.0, 0.25, 0.3);
        let mut z = DMatrix::from_fn(n, 1, |_, _| {
            let e: f64 = StandardNormal.sample(&mut rng);
            m0 + v0.sqrt() * e
        });
        let (mut m, mut v) = (m0, v0);
        for y in [2.0, 1.6, 1.9] {
            let pred = z.clone();
            z = enkf_analysis(&z, &pred, &DVector::from_element(1, y), sd, &mut rng).unwrap();
            let k = v / (v + sd * sd);
            m += k * (y - m);
            v *= 1.0 - k;
        }
        let mean = z.mean();
        let var = z.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert_relative_eq!(mean, m, epsilon = 0.01);
        assert_relative_eq!(var, v, max_relative = 0.05);
    }

    #[test]
    fn ensemble_size_and_range_preserved() {
        let mut rng = rng_from(9);
        let mut ens = Enkf::new(EnkfConfig { members: 64, ..EnkfConfig::default() }, SimulatorSpec::synthetic1d(), &mut rng).unwrap();
        for _ in 0..5 {
            ens.step(&batch(), &mut rng).unwrap();
        }
        assert_eq!(ens.members.nrows(), 64);
        assert!(ens.members.column(0).iter().all(|t| (0.0..=3.0).contains(t)));
        let th = ens.theta()[0];
        assert!((0.0..=3.0).contains(&th));
    }
}
