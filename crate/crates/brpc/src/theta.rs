//! Projected particle filter over the calibration parameter.
//!
//! Particles move by a clipped Gaussian random walk and are reweighted by the
//! tempered likelihood of the simulator alone, `N(Y; y_s(X, θ), σ²I)^η`. The
//! discrepancy never enters this update, which is what keeps θ pinned to the
//! projected target rather than to whatever the discrepancy model leaves over.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{BrpcError, Result};
use crate::gaussian::log_sum_exp;
use crate::seed::Rng;
use crate::simulator::SimulatorSpec;
use crate::stream::Batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThetaFilterConfig {
    pub rw_scale: f64,
    /// Admissible box, one `(lo, hi)` pair per coordinate.
    pub bounds: Vec<(f64, f64)>,
    pub eta_theta: f64,
    pub obs_sd: f64,
    pub ess_ratio: f64,
}

impl Default for ThetaFilterConfig {
    fn default() -> Self {
        ThetaFilterConfig {
            rw_scale: 0.1,
            bounds: vec![(0.0, 3.0)],
            eta_theta: 1.0,
            obs_sd: 0.05,
            ess_ratio: 0.5,
        }
    }
}

impl ThetaFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rw_scale >= 0.0) {
            return Err(BrpcError::invalid("rw_scale must be nonnegative"));
        }
        if self.bounds.is_empty() || self.bounds.iter().any(|(lo, hi)| !(hi >= lo)) {
            return Err(BrpcError::invalid("admissible range must be a nonempty box"));
        }
        if !(self.eta_theta >= 0.0) || !(self.obs_sd > 0.0) {
            return Err(BrpcError::invalid("eta_theta must be nonnegative and obs_sd positive"));
        }
        if !(self.ess_ratio >= 0.0 && self.ess_ratio <= 1.0) {
            return Err(BrpcError::invalid("ess_ratio must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }
}

/// Weighted particles; positions stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleCloud {
    dim: usize,
    positions: Vec<f64>,
    weights: Vec<f64>,
}

impl ParticleCloud {
    pub fn new(dim: usize, positions: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 || positions.len() != dim * weights.len() || weights.is_empty() {
            return Err(BrpcError::invalid(format!(
                "{} coordinates and {} weights do not form a cloud of dimension {dim}",
                positions.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(BrpcError::invalid("particle weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(BrpcError::invalid("particle weights sum to zero"));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(ParticleCloud {
            dim,
            positions,
            weights,
        })
    }

    pub fn uniform_weights(dim: usize, positions: Vec<f64>) -> Result<Self> {
        let n = positions.len() / dim.max(1);
        Self::new(dim, positions, vec![1.0 / n as f64; n])
    }

    /// I.i.d. uniform draws on the admissible box with equal weights.
    pub fn init_uniform(cfg: &ThetaFilterConfig, n: usize, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        if n == 0 {
            return Err(BrpcError::invalid("particle count must be positive"));
        }
        let mut positions = Vec::with_capacity(n * cfg.dim());
        for _ in 0..n {
            for &(lo, hi) in &cfg.bounds {
                positions.push(lo + (hi - lo) * rng.random::<f64>());
            }
        }
        Self::uniform_weights(cfg.dim(), positions)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn particles(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.positions.chunks_exact(self.dim)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }
}

/// `1 / Σ w²`.
pub fn ess(cloud: &ParticleCloud) -> f64 {
    1.0 / cloud.weights.iter().map(|w| w * w).sum::<f64>()
}

/// `Σ w θ`.
pub fn posterior_mean(cloud: &ParticleCloud) -> Vec<f64> {
    let mut m = vec![0.0; cloud.dim];
    for (p, w) in cloud.particles().zip(&cloud.weights) {
        for (mi, pi) in m.iter_mut().zip(p) {
            *mi += w * pi;
        }
    }
    m
}

pub fn propagate(cloud: &ParticleCloud, cfg: &ThetaFilterConfig, rng: &mut Rng) -> ParticleCloud {
    let mut out = cloud.clone();
    if cfg.rw_scale == 0.0 {
        return out;
    }
    for p in out.positions.chunks_exact_mut(cloud.dim) {
        for (v, &(lo, hi)) in p.iter_mut().zip(&cfg.bounds) {
            let z: f64 = StandardNormal.sample(rng);
            *v = (*v + cfg.rw_scale * z).clamp(lo, hi);
        }
    }
    out
}

/// Gaussian log-likelihood of the batch under the simulator alone.
pub fn simulator_loglik(theta: &[f64], batch: &Batch, sim: &SimulatorSpec, sd: f64) -> f64 {
    let var = sd * sd;
    let n = batch.len() as f64;
    let sse: f64 = batch
        .inputs
        .iter()
        .zip(batch.observations.iter())
        .map(|(x, y)| {
            let r = y - sim.eval(x, theta);
            r * r
        })
        .sum();
    -0.5 * sse / var - 0.5 * n * (2.0 * std::f64::consts::PI * var).ln()
}

/// Outcome of a reweighting; `underflow` is set when every log-weight was `-inf` and
/// the weights were reset to uniform.
#[derive(Debug, Clone)]
pub struct Reweighted {
    pub cloud: ParticleCloud,
    pub underflow: bool,
}

pub fn reweight(cloud: &ParticleCloud, batch: &Batch, sim: &SimulatorSpec, cfg: &ThetaFilterConfig) -> Reweighted {
    let logw: Vec<f64> = cloud
        .particles()
        .zip(&cloud.weights)
        .map(|(p, w)| {
            if cfg.eta_theta == 0.0 {
                w.ln()
            } else {
                w.ln() + cfg.eta_theta * simulator_loglik(p, batch, sim, cfg.obs_sd)
            }
        })
        .collect();
    let lse = log_sum_exp(&logw);
    let mut out = cloud.clone();
    if !lse.is_finite() {
        let n = cloud.len() as f64;
        out.weights.iter_mut().for_each(|w| *w = 1.0 / n);
        return Reweighted {
            cloud: out,
            underflow: true,
        };
    }
    for (w, lw) in out.weights.iter_mut().zip(&logw) {
        *w = (lw - lse).exp();
    }
    let total: f64 = out.weights.iter().sum();
    out.weights.iter_mut().for_each(|w| *w /= total);
    Reweighted {
        cloud: out,
        underflow: false,
    }
}

/// Ancestor indices by systematic resampling: one uniform offset, stride `1/N`.
pub fn systematic_ancestors(weights: &[f64], rng: &mut Rng) -> Vec<usize> {
    let n = weights.len();
    let u0: f64 = rng.random::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut j = 0;
    for i in 0..n {
        let u = u0 + i as f64 / n as f64;
        while u >= cum && j + 1 < n {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
    }
    out
}

pub fn resample_with(cloud: &ParticleCloud, ancestors: &[usize]) -> ParticleCloud {
    let mut positions = Vec::with_capacity(cloud.positions.len());
    for &a in ancestors {
        positions.extend_from_slice(cloud.particle(a));
    }
    let n = ancestors.len();
    ParticleCloud {
        dim: cloud.dim,
        positions,
        weights: vec![1.0 / n as f64; n],
    }
}

pub fn resample_systematic(cloud: &ParticleCloud, rng: &mut Rng) -> (ParticleCloud, Vec<usize>) {
    let anc = systematic_ancestors(&cloud.weights, rng);
    (resample_with(cloud, &anc), anc)
}

/// One full θ step: propagate, reweight, resample when ESS < ratio·N.
#[derive(Debug, Clone)]
pub struct ThetaStep {
    pub cloud: ParticleCloud,
    pub ancestors: Option<Vec<usize>>,
    pub underflow: bool,
    pub ess: f64,
}

pub fn filter_step(
    cloud: &ParticleCloud,
    batch: &Batch,
    sim: &SimulatorSpec,
    cfg: &ThetaFilterConfig,
    rng: &mut Rng,
) -> ThetaStep {
    let moved = propagate(cloud, cfg, rng);
    let Reweighted { cloud: weighted, underflow } = reweight(&moved, batch, sim, cfg);
    let e = ess(&weighted);
    if e < cfg.ess_ratio * weighted.len() as f64 {
        let (c, anc) = resample_systematic(&weighted, rng);
        ThetaStep {
            cloud: c,
            ancestors: Some(anc),
            underflow,
            ess: e,
        }
    } else {
        ThetaStep {
            cloud: weighted,
            ancestors: None,
            underflow,
            ess: e,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::SupportSet;
    use crate::seed::rng_from;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn cloud1(pos: &[f64], w: &[f64]) -> ParticleCloud {
        ParticleCloud::new(1, pos.to_vec(), w.to_vec()).unwrap()
    }

    fn batch() -> Batch {
        let xs = [0.1, 0.4, 0.8];
        let sim = SimulatorSpec::synthetic1d();
        let y: Vec<f64> = xs.iter().map(|&x| sim.eval(&[x], &[1.3])).collect();
        Batch::new(SupportSet::from_scalars(&xs), DVector::from_vec(y)).unwrap()
    }

    #[test]
    fn ess_examples() {
        assert_relative_eq!(ess(&cloud1(&[0.0; 4], &[0.25; 4])), 4.0);
        assert_relative_eq!(ess(&cloud1(&[0.0; 4], &[1.0, 0.0, 0.0, 0.0])), 1.0);
        assert_relative_eq!(ess(&cloud1(&[0.0; 4], &[0.5, 0.5, 0.0, 0.0])), 2.0);
    }

    #[test]
    fn posterior_mean_examples() {
        assert_relative_eq!(posterior_mean(&cloud1(&[1.0, 3.0], &[0.5, 0.5]))[0], 2.0);
        assert_relative_eq!(posterior_mean(&cloud1(&[1.0, 3.0], &[1.0, 0.0]))[0], 1.0);
    }

    #[test]
    fn zero_walk_is_identity() {
        let cfg = ThetaFilterConfig {
            rw_scale: 0.0,
            ..Default::default()
        };
        let c = cloud1(&[0.5, 1.5, 2.5], &[0.2, 0.3, 0.5]);
        assert_eq!(propagate(&c, &cfg, &mut rng_from(1)), c);
    }

    #[test]
    fn walk_clips_and_keeps_weights() {
        let cfg = ThetaFilterConfig {
            rw_scale: 50.0,
            ..Default::default()
        };
        let c = cloud1(&[3.0; 64], &[1.0 / 64.0; 64]);
        let out = propagate(&c, &cfg, &mut rng_from(2));
        assert!(out.particles().all(|p| (0.0..=3.0).contains(&p[0])));
        assert!(out.particles().any(|p| p[0] == 3.0));
        assert!(out.particles().any(|p| p[0] == 0.0));
        assert_eq!(out.weights(), c.weights());
    }

    #[test]
    fn identical_particles_keep_weights() {
        let c = cloud1(&[1.1, 1.1, 1.1], &[0.2, 0.3, 0.5]);
        let r = reweight(&c, &batch(), &SimulatorSpec::synthetic1d(), &ThetaFilterConfig::default());
        for (a, b) in r.cloud.weights().iter().zip(c.weights()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_temper_keeps_weights() {
        let cfg = ThetaFilterConfig {
            eta_theta: 0.0,
            ..Default::default()
        };
        let c = cloud1(&[0.2, 1.3, 2.9], &[0.2, 0.3, 0.5]);
        let r = reweight(&c, &batch(), &SimulatorSpec::synthetic1d(), &cfg);
        for (a, b) in r.cloud.weights().iter().zip(c.weights()) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn underflow_resets_to_uniform() {
        let mut b = batch();
        b.observations[0] = 1e200;
        let c = cloud1(&[0.2, 1.3], &[0.5, 0.5]);
        let r = reweight(&c, &b, &SimulatorSpec::synthetic1d(), &ThetaFilterConfig::default());
        assert!(r.underflow);
        assert_eq!(r.cloud.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn degenerate_weights_resample_to_one_particle() {
        let c = cloud1(&[0.1, 0.2, 0.3, 0.4], &[0.0, 0.0, 1.0, 0.0]);
        let (out, anc) = resample_systematic(&c, &mut rng_from(3));
        assert_eq!(anc, vec![2; 4]);
        assert!(out.particles().all(|p| p[0] == 0.3));
        assert!(out.weights().iter().all(|&w| w == 0.25));
    }

    #[test]
    fn systematic_uniform_hits_each_stratum_once() {
        for seed in 0..20 {
            let anc = systematic_ancestors(&[0.125; 8], &mut rng_from(seed));
            assert_eq!(anc, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn resampling_is_deterministic_per_seed() {
        let c = cloud1(&[0.1, 0.2, 0.3, 0.4, 0.5], &[0.1, 0.4, 0.1, 0.3, 0.1]);
        let a = resample_systematic(&c, &mut rng_from(9));
        let b = resample_systematic(&c, &mut rng_from(9));
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn ess_ratio_extremes() {
        let sim = SimulatorSpec::synthetic1d();
        let mut rng = rng_from(4);
        let never = ThetaFilterConfig {
            ess_ratio: 0.0,
            ..Default::default()
        };
        let always = ThetaFilterConfig {
            ess_ratio: 1.0,
            ..Default::default()
        };
        let c = ParticleCloud::init_uniform(&never, 64, &mut rng).unwrap();
        for _ in 0..5 {
            assert!(filter_step(&c, &batch(), &sim, &never, &mut rng).ancestors.is_none());
            assert!(filter_step(&c, &batch(), &sim, &always, &mut rng).ancestors.is_some());
        }
    }
}
