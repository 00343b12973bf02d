//! Streaming Bayesian recursive projected calibration.
//!
//! A particle filter tracks the projected calibration parameter θ with a
//! discrepancy-free tempered likelihood while a recursive Gaussian-process state
//! learns the simulator discrepancy from the posterior-averaged residuals. Restart
//! detectors (BOCPD experts or a window-limited CUSUM on prequential scores) reset
//! both when the physical system changes regime.

pub mod baselines;
pub mod discrepancy;
pub mod engine;
pub mod error;
pub mod gaussian;
pub mod harness;
pub mod metrics;
pub mod mixture;
pub mod restart;
pub mod seed;
pub mod simulator;
pub mod stream;
pub mod theta;

pub use error::{BrpcError, Result};
