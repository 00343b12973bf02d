//! L2 projection of a physical response onto the simulator family.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::sobol::sobol_points;
use crate::error::{BrpcError, Result};
use crate::gaussian::PdFactor;
use crate::simulator::{highdim_basis, SimulatorKind, SimulatorSpec, HIGHDIM_INPUT, HIGHDIM_THETA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub theta_points: usize,
    pub x_points: usize,
    pub omega_lo: f64,
    pub omega_hi: f64,
    pub omega_points: usize,
    pub reference_points: usize,
    pub ridge: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            theta_lo: 0.0,
            theta_hi: 3.0,
            theta_points: 600,
            x_points: 400,
            omega_lo: 0.0,
            omega_hi: 25.0,
            omega_points: 2000,
            reference_points: 50_000,
            ridge: 1e-6,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.theta_points < 2 || self.x_points < 2 || self.omega_points < 2 {
            return Err(BrpcError::invalid("projection grids need at least two points"));
        }
        if self.reference_points == 0 {
            return Err(BrpcError::invalid("reference design must be nonempty"));
        }
        if !(self.theta_hi > self.theta_lo) || !(self.omega_hi > self.omega_lo) {
            return Err(BrpcError::invalid("projection grid ranges must be nonempty"));
        }
        if !(self.ridge >= 0.0) {
            return Err(BrpcError::invalid("ridge must be nonnegative"));
        }
        Ok(())
    }

    pub fn theta_spacing(&self) -> f64 {
        (self.theta_hi - self.theta_lo) / (self.theta_points - 1) as f64
    }
}

pub(crate) fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Brute-force projector for the one-dimensional simulator: minimizes the mean
/// squared gap on a uniform x-grid over a uniform θ-grid.
#[derive(Debug, Clone)]
pub struct GridProjector {
    thetas: Vec<f64>,
    xs: Vec<f64>,
    table: Vec<f64>,
}

impl GridProjector {
    pub fn new(grid: &GridConfig) -> Result<Self> {
        grid.validate()?;
        let thetas = linspace(grid.theta_lo, grid.theta_hi, grid.theta_points);
        let xs = linspace(0.0, 1.0, grid.x_points);
        let sim = SimulatorSpec::synthetic1d();
        let mut table = Vec::with_capacity(thetas.len() * xs.len());
        for &t in &thetas {
            table.extend(xs.iter().map(|&x| sim.eval(&[x], &[t])));
        }
        Ok(GridProjector { thetas, xs, table })
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    /// Projects the response sampled on `xs()`.
    pub fn project_values(&self, zeta: &[f64]) -> f64 {
        let nx = self.xs.len();
        let mut best = (f64::INFINITY, 0);
        for (i, row) in self.table.chunks_exact(nx).enumerate() {
            let loss: f64 = row.iter().zip(zeta).map(|(s, z)| (z - s) * (z - s)).sum();
            if loss < best.0 {
                best = (loss, i);
            }
        }
        self.thetas[best.1]
    }

    pub fn project(&self, f: &dyn Fn(&[f64]) -> f64) -> f64 {
        let zeta: Vec<f64> = self.xs.iter().map(|&x| f(&[x])).collect();
        self.project_values(&zeta)
    }
}

/// Ridge projector for the linear high-dimensional simulator on a Sobol design.
#[derive(Debug, Clone)]
pub struct RidgeProjector {
    design: Vec<f64>,
    /// `(ΦᵀΦ + λI)⁻¹ Φᵀ`, one row per parameter.
    hat: DMatrix<f64>,
}

impl RidgeProjector {
    pub fn new(grid: &GridConfig) -> Result<Self> {
        grid.validate()?;
        let n = grid.reference_points;
        let design: Vec<f64> = sobol_points(n + 1, HIGHDIM_INPUT).split_off(HIGHDIM_INPUT);
        let mut phi = DMatrix::zeros(n, HIGHDIM_THETA);
        for (m, x) in design.chunks_exact(HIGHDIM_INPUT).enumerate() {
            for (j, v) in highdim_basis(x).iter().enumerate() {
                phi[(m, j)] = *v;
            }
        }
        let mut normal = phi.transpose() * &phi;
        for j in 0..HIGHDIM_THETA {
            normal[(j, j)] += grid.ridge;
        }
        let f = PdFactor::new(&normal, "ridge normal equations")?;
        let hat = f.solve(&phi.transpose());
        Ok(RidgeProjector { design, hat })
    }

    pub fn design(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.design.chunks_exact(HIGHDIM_INPUT)
    }

    pub fn len(&self) -> usize {
        self.hat.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.hat.ncols() == 0
    }

    pub fn project_values(&self, zeta: &DVector<f64>) -> DVector<f64> {
        &self.hat * zeta
    }

    pub fn project(&self, f: &dyn Fn(&[f64]) -> f64) -> DVector<f64> {
        let zeta = DVector::from_iterator(self.len(), self.design().map(f));
        self.project_values(&zeta)
    }
}

/// Projected calibration target of `physical_fn`.
pub fn projected_target(
    spec: &SimulatorSpec,
    physical_fn: &dyn Fn(&[f64]) -> f64,
    grid: &GridConfig,
) -> Result<Vec<f64>> {
    spec.validate()?;
    match spec.kind {
        SimulatorKind::Synthetic1d => Ok(vec![GridProjector::new(grid)?.project(physical_fn)]),
        SimulatorKind::HighdimLinear => {
            Ok(RidgeProjector::new(grid)?.project(physical_fn).iter().copied().collect())
        }
    }
}

/// Precomputed map from the frequency ω of `ζ_ω(x) = 5x cos(ωx/2) + 5x` to its
/// projected target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OmegaMap {
    pub omegas: Vec<f64>,
    pub targets: Vec<f64>,
}

pub fn synthetic_zeta(omega: f64, x: f64) -> f64 {
    5.0 * x * (omega * x / 2.0).cos() + 5.0 * x
}

impl OmegaMap {
    pub fn build(grid: &GridConfig) -> Result<Self> {
        let proj = GridProjector::new(grid)?;
        let omegas = linspace(grid.omega_lo, grid.omega_hi, grid.omega_points);
        let targets = omegas
            .iter()
            .map(|&w| {
                let zeta: Vec<f64> = proj.xs().iter().map(|&x| synthetic_zeta(w, x)).collect();
                proj.project_values(&zeta)
            })
            .collect();
        Ok(OmegaMap { omegas, targets })
    }

    /// Index of the ω whose target is closest to `target` among those whose target
    /// lies in `[lo, hi]`; ties go to the lower ω.
    pub fn nearest(&self, target: f64, lo: f64, hi: f64) -> Result<usize> {
        let mut best: Option<(f64, usize)> = None;
        for (i, &t) in self.targets.iter().enumerate() {
            if t < lo || t > hi {
                continue;
            }
            let d = (t - target).abs();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        best.map(|(_, i)| i).ok_or_else(|| {
            BrpcError::invalid(format!(
                "no frequency in the grid projects into [{lo}, {hi}]"
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_grid() -> GridConfig {
        GridConfig {
            reference_points: 4096,
            ..GridConfig::default()
        }
    }

    #[test]
    fn simulator_response_projects_to_itself() {
        let grid = GridConfig::default();
        let proj = GridProjector::new(&grid).unwrap();
        let theta0 = proj.thetas()[371];
        let sim = SimulatorSpec::synthetic1d();
        let t = proj.project(&|x| sim.eval(x, &[theta0]));
        assert_eq!(t, theta0);
    }

    #[test]
    fn omega_fifteen_matches_double_loop() {
        let grid = GridConfig::default();
        let got = projected_target(&SimulatorSpec::synthetic1d(), &|x| synthetic_zeta(15.0, x[0]), &grid)
            .unwrap()[0];
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..600 {
            let th = 3.0 * i as f64 / 599.0;
            let mut loss = 0.0;
            for k in 0..400 {
                let x = k as f64 / 399.0;
                let d = 5.0 * x * (7.5 * x).cos() + 5.0 * x - (th * x).sin() - 5.0 * x;
                loss += d * d;
            }
            if loss < best.0 {
                best = (loss, th);
            }
        }
        assert_relative_eq!(got, best.1, epsilon = 1e-12);
    }

    #[test]
    fn ridge_recovers_span_member() {
        let grid = small_grid();
        let c = [0.3, -1.2, 0.7, 2.0, -0.4];
        let t = projected_target(
            &SimulatorSpec::highdim(),
            &|x| highdim_basis(x).iter().zip(&c).map(|(p, w)| p * w).sum(),
            &grid,
        )
        .unwrap();
        for (a, b) in t.iter().zip(&c) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn nearest_prefers_lower_omega_on_ties() {
        let map = OmegaMap {
            omegas: vec![1.0, 2.0, 3.0],
            targets: vec![1.5, 1.7, 1.5],
        };
        assert_eq!(map.nearest(1.5, 1.0, 2.5).unwrap(), 0);
        assert_eq!(map.nearest(1.62, 1.0, 2.5).unwrap(), 1);
        assert!(map.nearest(1.5, 2.0, 2.5).is_err());
    }
}
