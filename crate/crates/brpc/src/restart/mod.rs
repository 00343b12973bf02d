//! Restart mechanisms: BOCPD experts with a hard-restart rule and a
//! window-limited CUSUM on prequential scores.

pub mod bocpd;
pub mod wcusum;

use nalgebra::{DMatrix, DVector};

use crate::discrepancy::{DiscrepancyState, DiscrepancyUpdateConfig};
use crate::error::{BrpcError, Result};
use crate::gaussian::{logpdf_with_factor, PdFactor};
use crate::seed::Rng;
use crate::theta::{ParticleCloud, ThetaFilterConfig};

pub use bocpd::{Bocpd, BocpdConfig, BocpdOutcome, Expert, ExpertSlot};
pub use wcusum::{wcusum_step, ScoreStats, WcusumConfig, WindowStat};

/// Fresh segment state: uniform particles on the admissible box and a zero-mean
/// GP discrepancy prior.
pub fn init_restart_state(
    theta_cfg: &ThetaFilterConfig,
    disc_cfg: &DiscrepancyUpdateConfig,
    input_dim: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<(ParticleCloud, DiscrepancyState)> {
    let cloud = ParticleCloud::init_uniform(theta_cfg, n, rng)?;
    let disc = DiscrepancyState::fresh(disc_cfg, input_dim, n)?;
    Ok((cloud, disc))
}

/// `h(r) = 1 / (λ_h + r)`, capped at 1.
pub fn hazard(run_length: usize, hazard_scale: f64) -> f64 {
    let d = hazard_scale + run_length as f64;
    if d <= 1.0 {
        1.0
    } else {
        1.0 / d
    }
}

/// A Gaussian `N(μ, Σ)` used by the restart-odds diagnostic.
#[derive(Debug, Clone)]
pub struct GaussianLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn checked_factor(law: &GaussianLaw, name: &str) -> Result<PdFactor> {
    if law.cov.nrows() != law.mean.len() {
        return Err(BrpcError::invalid(format!("{name}: covariance does not match mean")));
    }
    PdFactor::new(&law.cov, name)
}

/// Expected log-odds of a fresh expert against a continuing one when
/// `Y ~ N(μ*, Σ*)` and both predictive laws are Gaussian.
pub fn expected_restart_odds(
    cont: &GaussianLaw,
    fresh: &GaussianLaw,
    truth: &GaussianLaw,
    hazard: f64,
    prev_weight: f64,
) -> Result<f64> {
    if !(hazard > 0.0 && hazard < 1.0) || !(prev_weight > 0.0) {
        return Err(BrpcError::invalid("hazard must lie in (0, 1) and the previous weight be positive"));
    }
    let fc = checked_factor(cont, "continuation covariance")?;
    let fnw = checked_factor(fresh, "fresh covariance")?;
    checked_factor(truth, "data covariance")?;
    let trace = (fc.solve(&truth.cov) - fnw.solve(&truth.cov)).trace();
    let prior = (hazard / ((1.0 - hazard) * prev_weight)).ln();
    Ok(prior
        + 0.5
            * (fc.log_det() - fnw.log_det() + trace + fc.quad_form(&(&truth.mean - &cont.mean))
                - fnw.quad_form(&(&truth.mean - &fresh.mean))))
}

/// Realized log-odds `log(w_new / w_e)` for one draw `y`.
pub fn restart_log_odds(
    y: &DVector<f64>,
    cont: &GaussianLaw,
    fresh: &GaussianLaw,
    hazard: f64,
    prev_weight: f64,
) -> Result<f64> {
    let fc = checked_factor(cont, "continuation covariance")?;
    let fnw = checked_factor(fresh, "fresh covariance")?;
    Ok((hazard / ((1.0 - hazard) * prev_weight)).ln() + logpdf_with_factor(&(y - &fresh.mean), &fnw)
        - logpdf_with_factor(&(y - &cont.mean), &fc))
}
