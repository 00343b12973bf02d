//! Comparison methods: sliding-window Bayesian calibration, a Ward-style particle
//! filter with a trailing residual GP, and a joint ensemble Kalman filter.

pub mod bc;
pub mod enkf;
pub mod ward;

pub use bc::{bc_window_step, BcConfig, BcFit, BcWindow};
pub use enkf::{enkf_analysis, enkf_step, Enkf, EnkfConfig};
pub use ward::{ward_pf_step, LengthscaleWalk, WardPf, WardPfConfig};

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::gaussian::{gram, kernel_matrix, KernelConfig, PdFactor, SupportSet};
use crate::stream::Batch;

/// Zero-mean GP regression with homoscedastic noise.
#[derive(Debug, Clone)]
pub struct GpRegression {
    support: SupportSet,
    kernel: KernelConfig,
    factor: PdFactor,
    alpha: DVector<f64>,
}

impl GpRegression {
    pub fn fit(support: &SupportSet, targets: &DVector<f64>, kernel: &KernelConfig, noise_sd: f64) -> Result<Self> {
        let factor = noisy_gram_factor(support, kernel, noise_sd)?;
        let alpha = factor.solve_vec(targets);
        Ok(GpRegression {
            support: support.clone(),
            kernel: kernel.clone(),
            factor,
            alpha,
        })
    }

    pub fn mean(&self, x: &SupportSet) -> Result<DVector<f64>> {
        let k = kernel_matrix(x, &self.support, &self.kernel)?;
        Ok(k * &self.alpha)
    }

    /// Latent posterior covariance at `x` (no observation noise).
    pub fn covariance(&self, x: &SupportSet) -> Result<DMatrix<f64>> {
        let k = kernel_matrix(&self.support, x, &self.kernel)?;
        let v = self.factor.solve_lower(&k);
        Ok(gram(x, &self.kernel) - v.transpose() * v)
    }
}

pub(crate) fn noisy_gram_factor(support: &SupportSet, kernel: &KernelConfig, noise_sd: f64) -> Result<PdFactor> {
    let mut k = gram(support, kernel);
    for i in 0..k.nrows() {
        k[(i, i)] += noise_sd * noise_sd;
    }
    PdFactor::new(&k, "noisy kernel matrix")
}

/// Most recent observations, oldest first, capped at `capacity`.
#[derive(Debug, Clone)]
pub struct ObsWindow {
    capacity: usize,
    dim: usize,
    points: VecDeque<(Vec<f64>, f64)>,
}

impl ObsWindow {
    pub fn new(capacity: usize, dim: usize) -> Self {
        ObsWindow {
            capacity,
            dim,
            points: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn push_batch(&mut self, batch: &Batch) {
        for (x, y) in batch.inputs.iter().zip(batch.observations.iter()) {
            self.points.push_back((x.to_vec(), *y));
            if self.points.len() > self.capacity {
                self.points.pop_front();
            }
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn batch(&self) -> Batch {
        let coords: Vec<f64> = self.points.iter().flat_map(|(x, _)| x.iter().copied()).collect();
        let inputs = SupportSet::from_flat(self.dim, coords).expect("window points share one dimension");
        let obs = DVector::from_iterator(self.points.len(), self.points.iter().map(|(_, y)| *y));
        Batch {
            inputs,
            observations: obs,
        }
    }
}

fn box_center(bounds: &[(f64, f64)]) -> Vec<f64> {
    bounds.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect()
}
