//! Sliding-window Bayesian calibration, BC(W).
//!
//! Every batch the window is refitted from scratch: a zero-mean GP discrepancy is
//! fitted to `Y − y_s(X, θ)` for each candidate θ and the candidate with the largest
//! marginal likelihood is kept. For simulators linear in θ the maximizer has a
//! closed form (generalized least squares) and replaces the grid.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{box_center, noisy_gram_factor, GpRegression, ObsWindow};
use crate::error::{BrpcError, Result};
use crate::gaussian::{gram, logpdf_with_factor, KernelConfig, PdFactor, SupportSet};
use crate::mixture::{GaussianMixture, MixtureCovariance};
use crate::simulator::{SimulatorKind, SimulatorSpec};
use crate::stream::projection::linspace;
use crate::stream::Batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcConfig {
    pub window: usize,
    pub theta_grid_size: usize,
    pub bounds: Vec<(f64, f64)>,
    pub obs_sd: f64,
    pub disc_kernel: KernelConfig,
}

impl Default for BcConfig {
    fn default() -> Self {
        BcConfig {
            window: 80,
            theta_grid_size: 200,
            bounds: vec![(0.0, 3.0)],
            obs_sd: 0.2,
            disc_kernel: KernelConfig {
                signal_variance: 1.0,
                lengthscale: 0.3,
                jitter: 1e-10,
            },
        }
    }
}

impl BcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.theta_grid_size == 0 {
            return Err(BrpcError::invalid("BC window and grid size must be positive"));
        }
        if self.bounds.is_empty() || self.bounds.iter().any(|(lo, hi)| !(hi >= lo)) {
            return Err(BrpcError::invalid("BC calibration range must be a nonempty box"));
        }
        if !(self.obs_sd > 0.0) {
            return Err(BrpcError::invalid("BC obs_sd must be positive"));
        }
        self.disc_kernel.validate()
    }
}

/// Selected θ and the GP fitted to its residuals. `gp` is `None` for an empty window.
#[derive(Debug, Clone)]
pub struct BcFit {
    pub theta: Vec<f64>,
    pub grid_index: Option<usize>,
    pub log_marginals: Vec<f64>,
    gp: Option<GpRegression>,
}

impl BcFit {
    pub fn predict(&self, x: &SupportSet, sim: &SimulatorSpec, cfg: &BcConfig) -> Result<GaussianMixture> {
        let base = sim.eval_batch(x, &self.theta);
        let (mean, mut cov) = match &self.gp {
            Some(gp) => (base + gp.mean(x)?, gp.covariance(x)?),
            None => (base, gram(x, &cfg.disc_kernel)),
        };
        for i in 0..cov.nrows() {
            cov[(i, i)] += cfg.obs_sd * cfg.obs_sd;
        }
        GaussianMixture::new(vec![1.0], vec![mean], MixtureCovariance::Shared(cov))
    }
}

/// Refit on `history`. An empty history yields the box center with no GP.
pub fn bc_window_step(history: &Batch, sim: &SimulatorSpec, cfg: &BcConfig) -> Result<BcFit> {
    if cfg.bounds.len() != sim.theta_dim {
        return Err(BrpcError::invalid(format!(
            "BC range has {} coordinates, simulator has {}",
            cfg.bounds.len(),
            sim.theta_dim
        )));
    }
    if history.is_empty() {
        return Ok(BcFit {
            theta: box_center(&cfg.bounds),
            grid_index: None,
            log_marginals: vec![],
            gp: None,
        });
    }
    let x = &history.inputs;
    let y = &history.observations;
    let factor = noisy_gram_factor(x, &cfg.disc_kernel, cfg.obs_sd)?;
    let (theta, grid_index, log_marginals) = match sim.kind {
        SimulatorKind::HighdimLinear => (gls_theta(history, sim, cfg, &factor)?, None, vec![]),
        SimulatorKind::Synthetic1d => {
            let (lo, hi) = cfg.bounds[0];
            let grid = linspace(lo, hi, cfg.theta_grid_size);
            let lls: Vec<f64> = grid
                .iter()
                .map(|&t| logpdf_with_factor(&(y - sim.eval_batch(x, &[t])), &factor))
                .collect();
            let mut best = 0;
            for (i, ll) in lls.iter().enumerate() {
                if *ll > lls[best] {
                    best = i;
                }
            }
            (vec![grid[best]], Some(best), lls)
        }
    };
    let resid = y - sim.eval_batch(x, &theta);
    let gp = GpRegression::fit(x, &resid, &cfg.disc_kernel, cfg.obs_sd)?;
    Ok(BcFit {
        theta,
        grid_index,
        log_marginals,
        gp: Some(gp),
    })
}

/// Marginal-likelihood maximizer for a simulator linear in θ, clipped to the box.
fn gls_theta(history: &Batch, sim: &SimulatorSpec, cfg: &BcConfig, factor: &PdFactor) -> Result<Vec<f64>> {
    let p = sim.theta_dim;
    let n = history.len();
    let mut phi = DMatrix::zeros(n, p);
    for j in 0..p {
        let mut e = vec![0.0; p];
        e[j] = 1.0;
        phi.set_column(j, &sim.eval_batch(&history.inputs, &e));
    }
    let kinv_phi = factor.solve(&phi);
    let mut normal = phi.transpose() * &kinv_phi;
    let ridge = 1e-10 * normal.trace().max(1.0) / p as f64;
    for j in 0..p {
        normal[(j, j)] += ridge;
    }
    let rhs: DVector<f64> = kinv_phi.transpose() * &history.observations;
    let sol = normal
        .cholesky()
        .ok_or_else(|| BrpcError::numerical("BC normal equations", "not positive definite"))?
        .solve(&rhs);
    Ok(sol.iter().zip(&cfg.bounds).map(|(v, (lo, hi))| v.clamp(*lo, *hi)).collect())
}

/// BC(W) as a streaming method: predict from the last fit, then slide and refit.
#[derive(Debug, Clone)]
pub struct BcWindow {
    cfg: BcConfig,
    sim: SimulatorSpec,
    window: ObsWindow,
    fit: BcFit,
}

impl BcWindow {
    pub fn new(cfg: BcConfig, sim: SimulatorSpec) -> Result<Self> {
        cfg.validate()?;
        let window = ObsWindow::new(cfg.window, sim.input_dim);
        let fit = bc_window_step(&window.batch(), &sim, &cfg)?;
        Ok(BcWindow { cfg, sim, window, fit })
    }

    pub fn theta(&self) -> &[f64] {
        &self.fit.theta
    }

    pub fn fit(&self) -> &BcFit {
        &self.fit
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn predict(&self, x: &SupportSet) -> Result<GaussianMixture> {
        self.fit.predict(x, &self.sim, &self.cfg)
    }

    pub fn step(&mut self, batch: &Batch) -> Result<()> {
        self.window.push_batch(batch);
        self.fit = bc_window_step(&self.window.batch(), &self.sim, &self.cfg)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn synthetic_batch(xs: &[f64], theta: f64) -> Batch {
        let sim = SimulatorSpec::synthetic1d();
        let inputs = SupportSet::from_scalars(xs);
        let y = sim.eval_batch(&inputs, &[theta]);
        Batch::new(inputs, y).unwrap()
    }

    fn brute_force_loglik(b: &Batch, theta: f64, cfg: &BcConfig) -> f64 {
        let n = b.len();
        let xs: Vec<f64> = b.inputs.iter().map(|p| p[0]).collect();
        let k = &cfg.disc_kernel;
        let mut c = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let d = xs[i] - xs[j];
                c[(i, j)] = k.signal_variance * (-0.5 * d * d / (k.lengthscale * k.lengthscale)).exp();
            }
            c[(i, i)] += k.jitter + cfg.obs_sd * cfg.obs_sd;
        }
        let r = DVector::from_iterator(n, xs.iter().zip(b.observations.iter()).map(|(x, y)| y - ((theta * x).sin() + 5.0 * x)));
        let lu = c.clone().lu();
        let quad = r.dot(&lu.solve(&r).unwrap());
        -0.5 * (quad + lu.determinant().ln() + n as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    #[test]
    fn zero_noise_window_recovers_grid_theta() {
        let cfg = BcConfig::default();
        let grid = linspace(0.0, 3.0, cfg.theta_grid_size);
        let truth = grid[121];
        let xs: Vec<f64> = (0..40).map(|i| (i as f64 + 0.5) / 40.0).collect();
        let b = synthetic_batch(&xs, truth);
        let fit = bc_window_step(&b, &SimulatorSpec::synthetic1d(), &cfg).unwrap();
        assert_eq!(fit.grid_index, Some(121));
        assert_eq!(fit.theta, vec![truth]);
        let brute: Vec<f64> = grid.iter().map(|&t| brute_force_loglik(&b, t, &cfg)).collect();
        let arg = (0..brute.len()).fold(0, |a, i| if brute[i] > brute[a] { i } else { a });
        assert_eq!(arg, 121);
        for (a, b) in fit.log_marginals.iter().zip(&brute) {
            assert_relative_eq!(*a, *b, max_relative = 1e-8);
        }
    }

    #[test]
    fn short_history_uses_every_point() {
        let mut bc = BcWindow::new(BcConfig::default(), SimulatorSpec::synthetic1d()).unwrap();
        assert_eq!(bc.theta(), &[1.5]);
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 20.0).collect();
        bc.step(&synthetic_batch(&xs, 1.0)).unwrap();
        assert_eq!(bc.window_len(), 20);
        for _ in 0..5 {
            bc.step(&synthetic_batch(&xs, 1.0)).unwrap();
        }
        assert_eq!(bc.window_len(), 80);
    }

    #[test]
    fn single_point_predictive_is_scalar_regression() {
        let cfg = BcConfig::default();
        let sim = SimulatorSpec::synthetic1d();
        let b = Batch::new(SupportSet::from_scalars(&[0.4]), DVector::from_element(1, 3.0)).unwrap();
        let fit = bc_window_step(&b, &sim, &cfg).unwrap();
        let t = fit.theta[0];
        let r = 3.0 - sim.eval(&[0.4], &[t]);
        let xs = 0.55;
        let k = &cfg.disc_kernel;
        let kxs = k.signal_variance * (-0.5 * (0.15f64 / k.lengthscale).powi(2)).exp();
        let kxx = k.signal_variance + k.jitter + cfg.obs_sd * cfg.obs_sd;
        let law = fit.predict(&SupportSet::from_scalars(&[xs]), &sim, &cfg).unwrap();
        assert_relative_eq!(law.means[0][0], sim.eval(&[xs], &[t]) + kxs / kxx * r, epsilon = 1e-12);
        let var = k.signal_variance + k.jitter - kxs * kxs / kxx + cfg.obs_sd * cfg.obs_sd;
        assert_relative_eq!(law.component_cov(0)[(0, 0)], var, epsilon = 1e-12);
    }

    #[test]
    fn linear_simulator_uses_closed_form_maximizer() {
        use crate::simulator::highdim_basis;
        let sim = SimulatorSpec::highdim();
        let cfg = BcConfig {
            bounds: vec![(-4.0, 4.0); 5],
            ..BcConfig::default()
        };
        let truth = [0.5, -1.0, 2.0, 0.0, 1.5];
        let mut rng = crate::seed::rng_from(11);
        let pts: Vec<Vec<f64>> = (0..60)
            .map(|_| (0..20).map(|_| rand::Rng::random::<f64>(&mut rng)).collect())
            .collect();
        let inputs = SupportSet::from_points(&pts).unwrap();
        let y = DVector::from_iterator(60, pts.iter().map(|p| highdim_basis(p).iter().zip(&truth).map(|(a, b)| a * b).sum()));
        let fit = bc_window_step(&Batch::new(inputs, y).unwrap(), &sim, &cfg).unwrap();
        for (a, b) in fit.theta.iter().zip(&truth) {
            assert_relative_eq!(*a, *b, epsilon = 1e-6);
        }
    }
}
