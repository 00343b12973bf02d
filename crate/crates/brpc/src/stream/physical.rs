//! Physical responses for the high-dimensional benchmark.
//!
//! `ζ(x) = Σ a_j g_j(x) + 0.4 h(x)` where `g_j` is a nonlinear family outside the
//! simulator span and `h` is a random Fourier field amplified near a bump centered
//! at `c` in the first three coordinates.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::projection::RidgeProjector;
use crate::seed::Rng;
use crate::simulator::{HIGHDIM_INPUT, HIGHDIM_THETA};

pub const FOURIER_FEATURES: usize = 32;
const FEATURE_SCALE: f64 = 2.0;
const BUMP_CENTER: [f64; 3] = [0.5, 0.5, 0.5];
const BUMP_WIDTH: f64 = 0.2;

pub fn g_family(x: &[f64]) -> [f64; HIGHDIM_THETA] {
    let mut out = [0.0; HIGHDIM_THETA];
    for (j, o) in out.iter_mut().enumerate() {
        *o = (2.0 * PI * x[j] + 0.4 * x[j + 5]).sin()
            + 0.4 * (2.0 * PI * x[j + 10]).cos()
            + 0.3 * x[j + 15] * x[j];
    }
    out
}

#[derive(Debug, Clone)]
pub struct FourierField {
    freqs: Vec<[f64; HIGHDIM_INPUT]>,
    phases: Vec<f64>,
    amps: Vec<f64>,
}

impl FourierField {
    pub fn sample(rng: &mut Rng) -> Self {
        let l = FOURIER_FEATURES;
        let amp_sd = (1.0 / l as f64).sqrt();
        let mut freqs = Vec::with_capacity(l);
        let mut phases = Vec::with_capacity(l);
        let mut amps = Vec::with_capacity(l);
        for _ in 0..l {
            let mut w = [0.0; HIGHDIM_INPUT];
            for v in w.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v = FEATURE_SCALE * z;
            }
            freqs.push(w);
            phases.push(rng.random::<f64>() * 2.0 * PI);
            let z: f64 = StandardNormal.sample(rng);
            amps.push(amp_sd * z);
        }
        FourierField { freqs, phases, amps }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let d2: f64 = (0..3).map(|i| (x[i] - BUMP_CENTER[i]).powi(2)).sum();
        let envelope = 1.0 + 1.5 * (-d2 / (2.0 * BUMP_WIDTH * BUMP_WIDTH)).exp();
        let field: f64 = self
            .freqs
            .iter()
            .zip(&self.phases)
            .zip(&self.amps)
            .map(|((w, b), a)| {
                let dot: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum();
                a * std::f64::consts::SQRT_2 * (dot + b).cos()
            })
            .sum();
        envelope * field
    }
}

/// Fixed random structure of one high-dimensional stream.
#[derive(Debug, Clone)]
pub struct HighdimWorld {
    pub a0: [f64; HIGHDIM_THETA],
    pub v1: [f64; HIGHDIM_THETA],
    pub v2: [f64; HIGHDIM_THETA],
    pub jump_dirs: Vec<[f64; HIGHDIM_THETA]>,
    pub field: FourierField,
}

pub fn unit_vector(rng: &mut Rng) -> [f64; HIGHDIM_THETA] {
    let mut v = [0.0; HIGHDIM_THETA];
    for c in v.iter_mut() {
        *c = StandardNormal.sample(rng);
    }
    let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    v.map(|c| c / n)
}

impl HighdimWorld {
    pub fn sample(rng: &mut Rng, jumps: usize) -> Self {
        let mut a0 = [0.0; HIGHDIM_THETA];
        for c in a0.iter_mut() {
            *c = StandardNormal.sample(rng);
        }
        let v1 = unit_vector(rng);
        let v2 = unit_vector(rng);
        let jump_dirs = (0..jumps).map(|_| unit_vector(rng)).collect();
        let field = FourierField::sample(rng);
        HighdimWorld {
            a0,
            v1,
            v2,
            jump_dirs,
            field,
        }
    }

    pub fn zeta(&self, a: &[f64], x: &[f64]) -> f64 {
        let g = g_family(x);
        g.iter().zip(a).map(|(gj, aj)| gj * aj).sum::<f64>() + 0.4 * self.field.eval(x)
    }
}

/// Projection of `ζ_a` reduced to an affine map of the coefficient vector.
#[derive(Debug, Clone)]
pub struct HighdimTargetMap {
    linear: DMatrix<f64>,
    offset: DVector<f64>,
}

impl HighdimTargetMap {
    pub fn new(world: &HighdimWorld, projector: &RidgeProjector) -> Self {
        let n = projector.len();
        let mut g = DMatrix::zeros(n, HIGHDIM_THETA);
        let mut h = DVector::zeros(n);
        for (m, x) in projector.design().enumerate() {
            for (j, v) in g_family(x).iter().enumerate() {
                g[(m, j)] = *v;
            }
            h[m] = 0.4 * world.field.eval(x);
        }
        let mut linear = DMatrix::zeros(HIGHDIM_THETA, HIGHDIM_THETA);
        for j in 0..HIGHDIM_THETA {
            linear.set_column(j, &projector.project_values(&g.column(j).into_owned()));
        }
        HighdimTargetMap {
            linear,
            offset: projector.project_values(&h),
        }
    }

    pub fn target(&self, a: &[f64]) -> Vec<f64> {
        let a = DVector::from_column_slice(a);
        (&self.linear * a + &self.offset).iter().copied().collect()
    }
}
