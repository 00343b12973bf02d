//! Finite Gaussian mixtures over a batch of responses.

use nalgebra::{DMatrix, DVector};

use crate::error::{BrpcError, Result};
use crate::gaussian::{log_sum_exp, logpdf_with_factor, PdFactor};

#[derive(Debug, Clone)]
pub enum MixtureCovariance {
    Shared(DMatrix<f64>),
    PerComponent(Vec<DMatrix<f64>>),
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariance: MixtureCovariance,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covariance: MixtureCovariance) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(BrpcError::invalid(format!(
                "{} weights for {} component means",
                weights.len(),
                means.len()
            )));
        }
        let dim = means[0].len();
        if means.iter().any(|m| m.len() != dim) {
            return Err(BrpcError::invalid("mixture components differ in dimension"));
        }
        let ok = match &covariance {
            MixtureCovariance::Shared(c) => c.nrows() == dim && c.ncols() == dim,
            MixtureCovariance::PerComponent(cs) => {
                cs.len() == means.len() && cs.iter().all(|c| c.nrows() == dim && c.ncols() == dim)
            }
        };
        if !ok {
            return Err(BrpcError::invalid("mixture covariance does not match component dimension"));
        }
        Ok(GaussianMixture {
            weights,
            means,
            covariance,
        })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn component_cov(&self, i: usize) -> &DMatrix<f64> {
        match &self.covariance {
            MixtureCovariance::Shared(c) => c,
            MixtureCovariance::PerComponent(cs) => &cs[i],
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m.axpy(*w, mu, 1.0);
        }
        m
    }

    /// `log Σ_i w_i N(y; μ_i, Σ_i)`.
    pub fn logpdf(&self, y: &DVector<f64>) -> Result<f64> {
        if y.len() != self.dim() {
            return Err(BrpcError::invalid(format!(
                "observation of length {} against mixture of dimension {}",
                y.len(),
                self.dim()
            )));
        }
        let terms: Vec<f64> = match &self.covariance {
            MixtureCovariance::Shared(c) => {
                let f = PdFactor::new(c, "predictive covariance")?;
                self.weights
                    .iter()
                    .zip(&self.means)
                    .map(|(w, mu)| w.ln() + logpdf_with_factor(&(y - mu), &f))
                    .collect()
            }
            MixtureCovariance::PerComponent(cs) => {
                let mut t = Vec::with_capacity(cs.len());
                for ((w, mu), c) in self.weights.iter().zip(&self.means).zip(cs) {
                    let f = PdFactor::new(c, "predictive covariance")?;
                    t.push(w.ln() + logpdf_with_factor(&(y - mu), &f));
                }
                t
            }
        };
        Ok(log_sum_exp(&terms))
    }

    /// Univariate marginal of coordinate `j`: (weights, means, standard deviations).
    pub fn marginal(&self, j: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let means = self.means.iter().map(|m| m[j]).collect();
        let sds = (0..self.len()).map(|i| self.component_cov(i)[(j, j)].max(0.0).sqrt()).collect();
        (self.weights.clone(), means, sds)
    }
}
