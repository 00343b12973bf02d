//! Computer models used by the benchmarks.
//!
//! `Synthetic1d` is `y_s(x, θ) = sin(θx) + 5x`. `HighdimLinear` is linear in a
//! five-dimensional θ over a fixed nonlinear basis of a 20-dimensional input.

use std::f64::consts::PI;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{BrpcError, Result};
use crate::gaussian::SupportSet;

pub const HIGHDIM_THETA: usize = 5;
pub const HIGHDIM_INPUT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimulatorKind {
    Synthetic1d,
    HighdimLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatorSpec {
    pub kind: SimulatorKind,
    pub theta_dim: usize,
    pub input_dim: usize,
}

impl SimulatorSpec {
    pub fn synthetic1d() -> Self {
        SimulatorSpec {
            kind: SimulatorKind::Synthetic1d,
            theta_dim: 1,
            input_dim: 1,
        }
    }

    pub fn highdim() -> Self {
        SimulatorSpec {
            kind: SimulatorKind::HighdimLinear,
            theta_dim: HIGHDIM_THETA,
            input_dim: HIGHDIM_INPUT,
        }
    }

    pub fn for_kind(kind: SimulatorKind) -> Self {
        match kind {
            SimulatorKind::Synthetic1d => Self::synthetic1d(),
            SimulatorKind::HighdimLinear => Self::highdim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            SimulatorKind::Synthetic1d => self.theta_dim == 1 && self.input_dim == 1,
            SimulatorKind::HighdimLinear => {
                self.theta_dim == HIGHDIM_THETA && self.input_dim == HIGHDIM_INPUT
            }
        };
        if ok {
            Ok(())
        } else {
            Err(BrpcError::invalid(format!(
                "{:?} simulator cannot have theta_dim={} input_dim={}",
                self.kind, self.theta_dim, self.input_dim
            )))
        }
    }

    /// Evaluation without dimension checks; callers guarantee the shapes.
    #[inline]
    pub fn eval(&self, x: &[f64], theta: &[f64]) -> f64 {
        match self.kind {
            SimulatorKind::Synthetic1d => (theta[0] * x[0]).sin() + 5.0 * x[0],
            SimulatorKind::HighdimLinear => highdim_basis(x)
                .iter()
                .zip(theta)
                .map(|(p, t)| p * t)
                .sum(),
        }
    }

    /// Simulator outputs at every point of `xs`.
    pub fn eval_batch(&self, xs: &SupportSet, theta: &[f64]) -> DVector<f64> {
        DVector::from_iterator(xs.len(), xs.iter().map(|x| self.eval(x, theta)))
    }
}

/// Checked single evaluation.
pub fn simulator_eval(spec: &SimulatorSpec, x: &[f64], theta: &[f64]) -> Result<f64> {
    spec.validate()?;
    if x.len() != spec.input_dim || theta.len() != spec.theta_dim {
        return Err(BrpcError::invalid(format!(
            "simulator expects x of length {} and theta of length {}, got {} and {}",
            spec.input_dim,
            spec.theta_dim,
            x.len(),
            theta.len()
        )));
    }
    Ok(spec.eval(x, theta))
}

/// `φ_j(x) = sin(2πx_j) + 0.5 cos(2πx_{j+5}) + 0.25 sin(2π(x_j + x_{j+10}))`, j = 1..5.
pub fn highdim_basis(x: &[f64]) -> [f64; HIGHDIM_THETA] {
    let mut out = [0.0; HIGHDIM_THETA];
    for (j, o) in out.iter_mut().enumerate() {
        *o = (2.0 * PI * x[j]).sin()
            + 0.5 * (2.0 * PI * x[j + 5]).cos()
            + 0.25 * (2.0 * PI * (x[j] + x[j + 10])).sin();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn synthetic_zero_input() {
        let s = SimulatorSpec::synthetic1d();
        assert_eq!(simulator_eval(&s, &[0.0], &[2.3]).unwrap(), 0.0);
    }

    #[test]
    fn synthetic_sine_zero() {
        let s = SimulatorSpec::synthetic1d();
        assert_relative_eq!(simulator_eval(&s, &[1.0], &[PI]).unwrap(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn shape_errors() {
        let s = SimulatorSpec::synthetic1d();
        assert!(simulator_eval(&s, &[0.0, 1.0], &[1.0]).is_err());
        let bad = SimulatorSpec {
            kind: SimulatorKind::HighdimLinear,
            theta_dim: 1,
            input_dim: 20,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn highdim_first_basis_by_hand() {
        let mut x = vec![0.0; 20];
        x[0] = 0.25;
        let mut theta = vec![0.0; 5];
        theta[0] = 1.0;
        let v = simulator_eval(&SimulatorSpec::highdim(), &x, &theta).unwrap();
        let expected = 1.0 + 0.5 * 1.0 + 0.25 * 1.0;
        assert_relative_eq!(v, expected, epsilon = 1e-12);
    }
}
