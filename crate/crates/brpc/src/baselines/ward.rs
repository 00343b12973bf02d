//! Ward-style particle-filter data assimilation.
//!
//! Particles random-walk in θ (and optionally in log kernel lengthscale) and are
//! weighted by the full-model likelihood `N(Y; y_s(X, θ_i) + μ(X), σ²I)`, where μ is
//! the mean of a GP fitted to the trailing window of residuals taken against the
//! current posterior-mean θ.

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{GpRegression, ObsWindow};
use crate::error::{BrpcError, Result};
use crate::gaussian::{gram, log_sum_exp, KernelConfig, SupportSet};
use crate::mixture::{GaussianMixture, MixtureCovariance};
use crate::seed::Rng;
use crate::simulator::SimulatorSpec;
use crate::stream::Batch;
use crate::theta::{ess, resample_systematic, simulator_loglik, ParticleCloud};

/// Random walk on `ln ℓ`, clipped to `[ln lo, ln hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthscaleWalk {
    pub lo: f64,
    pub hi: f64,
    pub rw_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WardPfConfig {
    pub particles: usize,
    pub bounds: Vec<(f64, f64)>,
    pub obs_sd: f64,
    pub rw_sd: f64,
    pub window: usize,
    pub disc_kernel: KernelConfig,
    pub lengthscale: Option<LengthscaleWalk>,
    pub ess_ratio: f64,
}

impl Default for WardPfConfig {
    fn default() -> Self {
        WardPfConfig {
            particles: 1024,
            bounds: vec![(0.0, 3.0)],
            obs_sd: 0.2,
            rw_sd: 0.05,
            window: 80,
            disc_kernel: KernelConfig {
                signal_variance: 1.0,
                lengthscale: 0.3,
                jitter: 1e-10,
            },
            lengthscale: None,
            ess_ratio: 0.5,
        }
    }
}

impl WardPfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 || self.window == 0 {
            return Err(BrpcError::invalid("particle count and residual window must be positive"));
        }
        if self.bounds.is_empty() || self.bounds.iter().any(|(lo, hi)| !(hi >= lo)) {
            return Err(BrpcError::invalid("calibration range must be a nonempty box"));
        }
        if !(self.obs_sd > 0.0) || !(self.rw_sd >= 0.0) {
            return Err(BrpcError::invalid("obs_sd must be positive and rw_sd nonnegative"));
        }
        if let Some(l) = &self.lengthscale {
            if !(l.lo > 0.0 && l.hi >= l.lo && l.rw_sd >= 0.0) {
                return Err(BrpcError::invalid("lengthscale walk needs 0 < lo <= hi and rw_sd >= 0"));
            }
        }
        self.disc_kernel.validate()
    }

    fn theta_dim(&self) -> usize {
        self.bounds.len()
    }
}

#[derive(Debug, Clone)]
pub struct WardPf {
    cfg: WardPfConfig,
    sim: SimulatorSpec,
    cloud: ParticleCloud,
    window: ObsWindow,
    pub underflow: bool,
}

impl WardPf {
    pub fn new(cfg: WardPfConfig, sim: SimulatorSpec, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if cfg.theta_dim() != sim.theta_dim {
            return Err(BrpcError::invalid("PF range does not match the simulator's θ dimension"));
        }
        let dim = cfg.theta_dim() + cfg.lengthscale.is_some() as usize;
        let mut pos = Vec::with_capacity(cfg.particles * dim);
        for _ in 0..cfg.particles {
            for &(lo, hi) in &cfg.bounds {
                pos.push(lo + (hi - lo) * rand::Rng::random::<f64>(rng));
            }
            if let Some(l) = &cfg.lengthscale {
                let (a, b) = (l.lo.ln(), l.hi.ln());
                pos.push(a + (b - a) * rand::Rng::random::<f64>(rng));
            }
        }
        let cloud = ParticleCloud::uniform_weights(dim, pos)?;
        let window = ObsWindow::new(cfg.window, sim.input_dim);
        Ok(WardPf {
            cfg,
            sim,
            cloud,
            window,
            underflow: false,
        })
    }

    pub fn cloud(&self) -> &ParticleCloud {
        &self.cloud
    }

    pub fn config(&self) -> &WardPfConfig {
        &self.cfg
    }

    /// Posterior mean of θ.
    pub fn theta(&self) -> Vec<f64> {
        let p = self.cfg.theta_dim();
        let mut m = vec![0.0; p];
        for (x, w) in self.cloud.particles().zip(self.cloud.weights()) {
            for j in 0..p {
                m[j] += w * x[j];
            }
        }
        m
    }

    /// Posterior mean of the kernel lengthscale (geometric), or the fixed one.
    pub fn lengthscale(&self) -> f64 {
        match &self.cfg.lengthscale {
            None => self.cfg.disc_kernel.lengthscale,
            Some(_) => {
                let j = self.cfg.theta_dim();
                let l: f64 = self.cloud.particles().zip(self.cloud.weights()).map(|(x, w)| w * x[j]).sum();
                l.exp()
            }
        }
    }

    fn kernel_with(&self, lengthscale: f64) -> KernelConfig {
        KernelConfig {
            lengthscale,
            ..self.cfg.disc_kernel.clone()
        }
    }

    /// Residual GP on the trailing window, anchored at the posterior-mean θ.
    fn residual_gp(&self, kernel: &KernelConfig) -> Result<Option<GpRegression>> {
        if self.window.is_empty() {
            return Ok(None);
        }
        let w = self.window.batch();
        let resid = &w.observations - self.sim.eval_batch(&w.inputs, &self.theta());
        GpRegression::fit(&w.inputs, &resid, kernel, self.cfg.obs_sd).map(Some)
    }

    pub fn predict(&self, x: &SupportSet) -> Result<GaussianMixture> {
        let kernel = self.kernel_with(self.lengthscale());
        let gp = self.residual_gp(&kernel)?;
        let (offset, mut cov) = match &gp {
            Some(g) => (g.mean(x)?, g.covariance(x)?),
            None => (DVector::zeros(x.len()), gram(x, &kernel)),
        };
        for i in 0..cov.nrows() {
            cov[(i, i)] += self.cfg.obs_sd * self.cfg.obs_sd;
        }
        let p = self.cfg.theta_dim();
        let means = self
            .cloud
            .particles()
            .map(|th| self.sim.eval_batch(x, &th[..p]) + &offset)
            .collect();
        GaussianMixture::new(self.cloud.weights().to_vec(), means, MixtureCovariance::Shared(cov))
    }

    pub fn step(&mut self, batch: &Batch, rng: &mut Rng) -> Result<()> {
        *self = ward_pf_step(self, batch, rng)?;
        Ok(())
    }
}

pub fn ward_pf_step(state: &WardPf, batch: &Batch, rng: &mut Rng) -> Result<WardPf> {
    let cfg = &state.cfg;
    let p = cfg.theta_dim();
    let dim = state.cloud.dim();
    let mut pos = state.cloud.positions().to_vec();
    for x in pos.chunks_exact_mut(dim) {
        if cfg.rw_sd > 0.0 {
            for (v, &(lo, hi)) in x[..p].iter_mut().zip(&cfg.bounds) {
                let z: f64 = StandardNormal.sample(rng);
                *v = (*v + cfg.rw_sd * z).clamp(lo, hi);
            }
        }
        if let Some(l) = &cfg.lengthscale {
            if l.rw_sd > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                x[p] = (x[p] + l.rw_sd * z).clamp(l.lo.ln(), l.hi.ln());
            }
        }
    }
    let moved = ParticleCloud::new(dim, pos, state.cloud.weights().to_vec())?;

    let shifted = |offset: Option<DVector<f64>>| Batch {
        inputs: batch.inputs.clone(),
        observations: match offset {
            Some(o) => &batch.observations - o,
            None => batch.observations.clone(),
        },
    };
    let loglik: Vec<f64> = match &cfg.lengthscale {
        None => {
            let gp = state.residual_gp(&cfg.disc_kernel)?;
            let b = shifted(gp.map(|g| g.mean(&batch.inputs)).transpose()?);
            moved
                .particles()
                .map(|x| simulator_loglik(&x[..p], &b, &state.sim, cfg.obs_sd))
                .collect()
        }
        Some(_) => {
            let particles: Vec<&[f64]> = moved.particles().collect();
            particles
                .par_iter()
                .map(|x| {
                    let gp = state.residual_gp(&state.kernel_with(x[p].exp()))?;
                    let b = shifted(gp.map(|g| g.mean(&batch.inputs)).transpose()?);
                    Ok(simulator_loglik(&x[..p], &b, &state.sim, cfg.obs_sd))
                })
                .collect::<Result<Vec<f64>>>()?
        }
    };

    let logw: Vec<f64> = moved.weights().iter().zip(&loglik).map(|(w, l)| w.ln() + l).collect();
    let lse = log_sum_exp(&logw);
    let n = moved.len();
    let (weights, underflow) = if lse.is_finite() {
        let mut w: Vec<f64> = logw.iter().map(|l| (l - lse).exp()).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        (w, false)
    } else {
        (vec![1.0 / n as f64; n], true)
    };
    let mut cloud = ParticleCloud::new(dim, moved.positions().to_vec(), weights)?;
    if ess(&cloud) < cfg.ess_ratio * n as f64 {
        cloud = resample_systematic(&cloud, rng).0;
    }
    let mut window = state.window.clone();
    window.push_batch(batch);
    Ok(WardPf {
        cfg: cfg.clone(),
        sim: state.sim,
        cloud,
        window,
        underflow,
    })
}
