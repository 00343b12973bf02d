//! Synthetic nonstationary streams with ground truth.
//!
//! One-dimensional families prescribe a path of projected targets θ*_b, invert it
//! through a precomputed ω → θ† map, and observe `ζ_ω(x) = 5x cos(ωx/2) + 5x` with
//! Gaussian noise at stratified inputs. High-dimensional families move the
//! coefficient vector of a physical response outside the simulator span and
//! recompute the ridge projection per batch.

pub mod physical;
pub mod projection;
pub mod sobol;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{BrpcError, Result};
use crate::gaussian::SupportSet;
use crate::seed::{child_rng, Rng};
use crate::simulator::{SimulatorKind, SimulatorSpec, HIGHDIM_INPUT, HIGHDIM_THETA};
use physical::{HighdimTargetMap, HighdimWorld};
pub use projection::{projected_target, synthetic_zeta, GridConfig, GridProjector, OmegaMap, RidgeProjector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamFamily {
    Drifting,
    Sudden,
    Mixed,
    HighdimDrifting,
    HighdimSudden,
    HighdimMixed,
    Stationary,
}

impl StreamFamily {
    pub fn simulator(self) -> SimulatorSpec {
        match self {
            StreamFamily::HighdimDrifting | StreamFamily::HighdimSudden | StreamFamily::HighdimMixed => {
                SimulatorSpec::highdim()
            }
            _ => SimulatorSpec::synthetic1d(),
        }
    }

    pub fn nominal_changepoints(self) -> Option<usize> {
        match self {
            StreamFamily::Drifting | StreamFamily::Stationary | StreamFamily::HighdimDrifting => Some(0),
            StreamFamily::Mixed | StreamFamily::HighdimMixed => Some(2),
            StreamFamily::HighdimSudden => Some(3),
            StreamFamily::Sudden => None,
        }
    }
}

/// Family parameters. Unset options resolve to per-family defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilyParams {
    pub theta0: Option<f64>,
    pub slope: f64,
    pub drift_perturb_sd: f64,
    pub segment_len: usize,
    pub jump: Option<f64>,
    pub ar_coef: f64,
    pub ar_sd: f64,
    pub drift_scale: f64,
    pub jump_scales: Vec<f64>,
    pub cp_jitter: usize,
    pub min_jump: f64,
    pub theta_lo: f64,
    pub theta_hi: f64,
}

impl Default for FamilyParams {
    fn default() -> Self {
        FamilyParams {
            theta0: None,
            slope: 1e-3,
            drift_perturb_sd: 0.0,
            segment_len: 200,
            jump: None,
            ar_coef: 0.65,
            ar_sd: 0.015,
            drift_scale: 0.009,
            jump_scales: vec![0.28, 0.38],
            cp_jitter: 2,
            min_jump: 0.15,
            theta_lo: 1.0,
            theta_hi: 2.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub family: StreamFamily,
    pub total_obs: usize,
    pub batch_size: usize,
    pub noise_sd: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: FamilyParams,
    #[serde(default)]
    pub grid: GridConfig,
}

impl StreamConfig {
    pub fn new(family: StreamFamily, total_obs: usize, batch_size: usize, noise_sd: f64, seed: u64) -> Self {
        StreamConfig {
            family,
            total_obs,
            batch_size,
            noise_sd,
            seed,
            params: FamilyParams::default(),
            grid: GridConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_obs == 0 {
            return Err(BrpcError::invalid("stream needs positive total_obs and batch_size"));
        }
        if self.total_obs % self.batch_size != 0 {
            return Err(BrpcError::invalid(format!(
                "total_obs {} is not divisible by batch_size {}",
                self.total_obs, self.batch_size
            )));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(BrpcError::invalid("noise_sd must be nonnegative"));
        }
        if !(self.params.theta_hi > self.params.theta_lo) {
            return Err(BrpcError::invalid("admissible range is empty"));
        }
        if self.family == StreamFamily::Sudden
            && (self.params.segment_len == 0 || self.params.segment_len % self.batch_size != 0)
        {
            return Err(BrpcError::invalid(
                "sudden segment length must be a positive multiple of the batch size",
            ));
        }
        self.grid.validate()
    }

    pub fn batches(&self) -> usize {
        self.total_obs / self.batch_size
    }

    pub fn theta0(&self) -> f64 {
        self.params.theta0.unwrap_or(match self.family {
            StreamFamily::Sudden => 1.2,
            StreamFamily::Mixed => 0.5 * (self.params.theta_lo + self.params.theta_hi),
            _ => 2.05,
        })
    }

    pub fn jump(&self) -> f64 {
        self.params.jump.unwrap_or(match self.family {
            StreamFamily::HighdimSudden => 1.2,
            _ => 1.0,
        })
    }
}

/// One generated batch with its latent truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub batch_index: usize,
    pub inputs: SupportSet,
    pub observations: Vec<f64>,
    pub zeta: Vec<f64>,
    pub latent_omega: Option<f64>,
    pub latent_coeff: Option<Vec<f64>>,
    pub projected_target: Vec<f64>,
    pub is_changepoint: bool,
}

/// Algorithm-facing view of a record.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: SupportSet,
    pub observations: DVector<f64>,
}

impl Batch {
    pub fn new(inputs: SupportSet, observations: DVector<f64>) -> Result<Self> {
        if inputs.len() != observations.len() {
            return Err(BrpcError::invalid(format!(
                "batch with {} inputs and {} observations",
                inputs.len(),
                observations.len()
            )));
        }
        Ok(Batch {
            inputs,
            observations,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

impl StreamRecord {
    pub fn batch(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            observations: DVector::from_column_slice(&self.observations),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stream {
    pub config: StreamConfig,
    pub records: Vec<StreamRecord>,
}

impl Stream {
    pub fn simulator(&self) -> SimulatorSpec {
        self.config.family.simulator()
    }

    pub fn changepoints(&self) -> Vec<usize> {
        self.records
            .iter()
            .filter(|r| r.is_changepoint)
            .map(|r| r.batch_index)
            .collect()
    }

    pub fn targets(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.projected_target.clone()).collect()
    }
}

/// Requested target path for one-dimensional families, with changepoint flags.
pub fn gen_trajectory(cfg: &StreamConfig) -> Result<Vec<(f64, bool)>> {
    let map = OmegaMap::build(&cfg.grid)?;
    gen_trajectory_with(cfg, &map)
}

pub fn gen_trajectory_with(cfg: &StreamConfig, map: &OmegaMap) -> Result<Vec<(f64, bool)>> {
    cfg.validate()?;
    let p = &cfg.params;
    let b = cfg.batches();
    let clip = |t: f64| t.clamp(p.theta_lo, p.theta_hi);
    let mut rng = child_rng(cfg.seed, &["trajectory"], 0);
    match cfg.family {
        StreamFamily::Stationary => Ok(vec![(clip(cfg.theta0()), false); b]),
        StreamFamily::Drifting => {
            let mut out = Vec::with_capacity(b);
            let mut theta = cfg.theta0();
            let mut xi = 0.0;
            for i in 0..b {
                if i > 0 {
                    if p.drift_perturb_sd > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        xi = p.ar_coef * xi + p.drift_perturb_sd * z;
                    }
                    theta += p.slope + xi;
                }
                out.push((clip(theta), false));
            }
            Ok(out)
        }
        StreamFamily::Sudden => {
            let every = p.segment_len / cfg.batch_size;
            let jump = cfg.jump();
            let mut theta = cfg.theta0();
            let mut out = Vec::with_capacity(b);
            for i in 0..b {
                let cp = i > 0 && i % every == 0;
                if cp {
                    theta = if theta + jump <= p.theta_hi {
                        theta + jump
                    } else if theta - jump >= p.theta_lo {
                        theta - jump
                    } else {
                        return Err(BrpcError::invalid(format!(
                            "jump {jump} cannot stay inside [{}, {}]",
                            p.theta_lo, p.theta_hi
                        )));
                    };
                }
                out.push((clip(theta), cp));
            }
            Ok(out)
        }
        StreamFamily::Mixed => mixed_trajectory(cfg, map, &mut rng),
        _ => Err(BrpcError::invalid(
            "target trajectories are defined for one-dimensional families only",
        )),
    }
}

fn mixed_trajectory(cfg: &StreamConfig, map: &OmegaMap, rng: &mut Rng) -> Result<Vec<(f64, bool)>> {
    let p = &cfg.params;
    let b = cfg.batches();
    if p.jump_scales.is_empty() {
        return Err(BrpcError::invalid("mixed family needs at least one jump scale"));
    }
    let width = p.theta_hi - p.theta_lo;
    let realize = |t: f64| -> Result<f64> { Ok(map.targets[map.nearest(t, p.theta_lo, p.theta_hi)?]) };
    for _attempt in 0..1000 {
        let jitter = p.cp_jitter as i64;
        let mut cps = Vec::with_capacity(2);
        for frac in [0.33, 0.70] {
            let base = (frac * b as f64).round() as i64;
            let c = base + rng.random_range(-jitter..=jitter);
            cps.push(c.clamp(1, b as i64 - 1) as usize);
        }
        if cps[0] >= cps[1] {
            continue;
        }
        let slopes: Vec<f64> = (0..3)
            .map(|_| if rng.random::<bool>() { p.drift_scale } else { -p.drift_scale })
            .collect();
        let jumps: Vec<f64> = (0..2)
            .map(|_| {
                let s = p.jump_scales[rng.random_range(0..p.jump_scales.len())];
                if rng.random::<bool>() {
                    s
                } else {
                    -s
                }
            })
            .collect();
        let mut raw = Vec::with_capacity(b);
        let mut theta = 0.0;
        let mut xi = 0.0;
        for i in 0..b {
            if i > 0 {
                let z: f64 = StandardNormal.sample(rng);
                xi = p.ar_coef * xi + p.ar_sd * z;
                let seg = cps.iter().filter(|&&c| i >= c).count();
                theta += slopes[seg] + xi;
                if let Some(j) = cps.iter().position(|&c| c == i) {
                    theta += jumps[j];
                }
            }
            raw.push(theta);
        }
        let mean = raw.iter().sum::<f64>() / b as f64;
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let scale = if span > 0.9 * width { 0.9 * width / span } else { 1.0 };
        let center = cfg.theta0();
        let path: Vec<f64> = raw
            .iter()
            .map(|t| (center + scale * (t - mean)).clamp(p.theta_lo, p.theta_hi))
            .collect();
        let mut ok = true;
        for &c in &cps {
            if (realize(path[c])? - realize(path[c - 1])?).abs() < p.min_jump {
                ok = false;
            }
        }
        if ok {
            return Ok(path
                .into_iter()
                .enumerate()
                .map(|(i, t)| (t, cps.contains(&i)))
                .collect());
        }
    }
    Err(BrpcError::invalid(
        "could not draw a mixed trajectory meeting the minimum realized jump",
    ))
}

/// Stratified inputs on [0, 1]: one uniform draw per equal cell, then shuffled.
pub fn stratified_inputs(k: usize, rng: &mut Rng) -> Vec<f64> {
    let mut xs: Vec<f64> = (0..k)
        .map(|i| (i as f64 + rng.random::<f64>()) / k as f64)
        .collect();
    xs.shuffle(rng);
    xs
}

pub fn gen_stream(cfg: &StreamConfig) -> Result<Stream> {
    cfg.validate()?;
    match cfg.family.simulator().kind {
        SimulatorKind::Synthetic1d => {
            let map = OmegaMap::build(&cfg.grid)?;
            gen_stream_with_map(cfg, &map)
        }
        SimulatorKind::HighdimLinear => gen_highdim_stream(cfg),
    }
}

/// One-dimensional generation reusing a precomputed ω map.
pub fn gen_stream_with_map(cfg: &StreamConfig, map: &OmegaMap) -> Result<Stream> {
    let path = gen_trajectory_with(cfg, map)?;
    let p = &cfg.params;
    let mut input_rng = child_rng(cfg.seed, &["inputs"], 0);
    let mut noise_rng = child_rng(cfg.seed, &["noise"], 0);
    let mut records = Vec::with_capacity(path.len());
    for (b, &(target, cp)) in path.iter().enumerate() {
        let idx = map.nearest(target, p.theta_lo, p.theta_hi)?;
        let omega = map.omegas[idx];
        let xs = stratified_inputs(cfg.batch_size, &mut input_rng);
        let zeta: Vec<f64> = xs.iter().map(|&x| synthetic_zeta(omega, x)).collect();
        let observations = noisy(&zeta, cfg.noise_sd, &mut noise_rng);
        records.push(StreamRecord {
            batch_index: b,
            inputs: SupportSet::from_scalars(&xs),
            observations,
            zeta,
            latent_omega: Some(omega),
            latent_coeff: None,
            projected_target: vec![map.targets[idx]],
            is_changepoint: cp,
        });
    }
    Ok(Stream {
        config: cfg.clone(),
        records,
    })
}

fn noisy(zeta: &[f64], sd: f64, rng: &mut Rng) -> Vec<f64> {
    zeta.iter()
        .map(|z| {
            let e: f64 = StandardNormal.sample(rng);
            z + sd * e
        })
        .collect()
}

/// Coefficient path `a_b` of a high-dimensional family with changepoint flags.
pub fn coefficient_path(cfg: &StreamConfig, world: &HighdimWorld) -> Result<Vec<([f64; HIGHDIM_THETA], bool)>> {
    let b = cfg.batches();
    let bf = b as f64;
    let cps: Vec<usize> = match cfg.family {
        StreamFamily::HighdimDrifting => vec![],
        StreamFamily::HighdimSudden => [0.25, 0.5, 0.75].iter().map(|f| (f * bf).round() as usize).collect(),
        StreamFamily::HighdimMixed => [0.33, 0.70].iter().map(|f| (f * bf).round() as usize).collect(),
        _ => return Err(BrpcError::invalid("not a high-dimensional family")),
    };
    let (drift, wiggle) = match cfg.family {
        StreamFamily::HighdimDrifting => (0.8, 0.15),
        StreamFamily::HighdimSudden => (0.0, 0.0),
        _ => (0.4, 0.10),
    };
    let jump = cfg.jump();
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let s = i as f64 / bf;
        let mut a = world.a0;
        for j in 0..HIGHDIM_THETA {
            a[j] += drift * s * world.v1[j] + wiggle * (2.0 * std::f64::consts::PI * s).sin() * world.v2[j];
            for (r, &c) in cps.iter().enumerate() {
                if i >= c {
                    a[j] += jump * world.jump_dirs[r][j];
                }
            }
        }
        out.push((a, cps.contains(&i)));
    }
    Ok(out)
}

fn gen_highdim_stream(cfg: &StreamConfig) -> Result<Stream> {
    let mut world_rng = child_rng(cfg.seed, &["world"], 0);
    let world = HighdimWorld::sample(&mut world_rng, 3);
    let projector = RidgeProjector::new(&cfg.grid)?;
    let targets = HighdimTargetMap::new(&world, &projector);
    let path = coefficient_path(cfg, &world)?;
    let mut input_rng = child_rng(cfg.seed, &["inputs"], 0);
    let mut noise_rng = child_rng(cfg.seed, &["noise"], 0);
    let mut records = Vec::with_capacity(path.len());
    for (b, (a, cp)) in path.iter().enumerate() {
        let coords: Vec<f64> = (0..cfg.batch_size * HIGHDIM_INPUT)
            .map(|_| input_rng.random::<f64>())
            .collect();
        let inputs = SupportSet::from_flat(HIGHDIM_INPUT, coords)?;
        let zeta: Vec<f64> = inputs.iter().map(|x| world.zeta(a, x)).collect();
        let observations = noisy(&zeta, cfg.noise_sd, &mut noise_rng);
        records.push(StreamRecord {
            batch_index: b,
            inputs,
            observations,
            zeta,
            latent_omega: None,
            latent_coeff: Some(a.to_vec()),
            projected_target: targets.target(a),
            is_changepoint: *cp,
        });
    }
    Ok(Stream {
        config: cfg.clone(),
        records,
    })
}
