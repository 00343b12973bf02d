//! Online methods behind one prequential interface: predict the incoming batch,
//! decide on a restart, then assimilate.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselines::{BcConfig, BcWindow, Enkf, EnkfConfig, WardPf, WardPfConfig};
use crate::discrepancy::{
    particle_residuals, predictive_law, rra_refit, shared_residual, DiscrepancyState, DiscrepancyUpdateConfig,
    Representation, Variant,
};
use crate::error::{BrpcError, Result};
use crate::gaussian::GaussianState;
use crate::metrics::{crps_ensemble, crps_gaussian_mixture, merge_components, BatchLog, PropagationRecord, RunLog};
use crate::mixture::GaussianMixture;
use crate::restart::{init_restart_state, wcusum_step, Bocpd, BocpdConfig, Expert, ScoreStats, WcusumConfig};
use crate::seed::{child_rng, derive_seed, Rng};
use crate::simulator::SimulatorSpec;
use crate::stream::{Batch, Stream};
use crate::theta::{filter_step, posterior_mean, ParticleCloud, ThetaFilterConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BrpcConfig {
    pub particles: usize,
    pub theta: ThetaFilterConfig,
    pub disc: DiscrepancyUpdateConfig,
    /// Refit the discrepancy offline on the segment's residuals re-anchored at the
    /// current particles instead of updating it recursively.
    pub rra: bool,
}

impl Default for BrpcConfig {
    fn default() -> Self {
        BrpcConfig {
            particles: 1024,
            theta: ThetaFilterConfig::default(),
            disc: DiscrepancyUpdateConfig::default(),
            rra: false,
        }
    }
}

impl BrpcConfig {
    pub fn validate(&self, sim: &SimulatorSpec) -> Result<()> {
        if self.particles == 0 {
            return Err(BrpcError::invalid("BRPC needs at least one particle"));
        }
        self.theta.validate()?;
        self.disc.validate()?;
        if self.theta.dim() != sim.theta_dim {
            return Err(BrpcError::invalid(format!(
                "θ range has {} coordinates, simulator has {}",
                self.theta.dim(),
                sim.theta_dim
            )));
        }
        Ok(())
    }
}

/// One BRPC state: particle cloud, discrepancy posterior and its own random stream.
#[derive(Debug, Clone)]
pub struct BrpcExpert {
    cfg: Arc<BrpcConfig>,
    sim: SimulatorSpec,
    cloud: ParticleCloud,
    disc: DiscrepancyState,
    segment: VecDeque<Batch>,
    rng: Rng,
    record: bool,
    updates: usize,
    last_record: Option<PropagationRecord>,
}

pub struct BrpcForecast {
    pub law: GaussianMixture,
    pub log_density: f64,
}

impl BrpcExpert {
    pub fn fresh(cfg: Arc<BrpcConfig>, sim: SimulatorSpec, seed: u64, record: bool) -> Result<Self> {
        let mut rng = crate::seed::rng_from(seed);
        let (cloud, disc) = init_restart_state(&cfg.theta, &cfg.disc, sim.input_dim, cfg.particles, &mut rng)?;
        Ok(BrpcExpert {
            cfg,
            sim,
            cloud,
            disc,
            segment: VecDeque::new(),
            rng,
            record,
            updates: 0,
            last_record: None,
        })
    }

    pub fn cloud(&self) -> &ParticleCloud {
        &self.cloud
    }

    pub fn discrepancy(&self) -> &DiscrepancyState {
        &self.disc
    }

    pub fn last_record(&self) -> Option<&PropagationRecord> {
        self.last_record.as_ref()
    }

    fn push_segment(&mut self, batch: &Batch) {
        self.segment.push_back(batch.clone());
        let window = self.cfg.disc.rra_window;
        let mut total: usize = self.segment.iter().map(Batch::len).sum();
        while let Some(front) = self.segment.front() {
            if total - front.len() >= window {
                total -= front.len();
                self.segment.pop_front();
            } else {
                break;
            }
        }
    }
}

impl Expert for BrpcExpert {
    type Forecast = BrpcForecast;

    fn forecast(&self, batch: &Batch) -> Result<BrpcForecast> {
        let law = predictive_law(
            &self.disc,
            &self.cloud,
            &batch.inputs,
            &self.sim,
            self.cfg.disc.residual_noise_sd,
        )?;
        let log_density = law.logpdf(&batch.observations)?;
        Ok(BrpcForecast { law, log_density })
    }

    fn log_density(f: &BrpcForecast) -> f64 {
        f.log_density
    }

    fn assimilate(&mut self, batch: &Batch) -> Result<()> {
        let step = filter_step(&self.cloud, batch, &self.sim, &self.cfg.theta, &mut self.rng);
        self.cloud = step.cloud;
        if let Some(anc) = &step.ancestors {
            self.disc.resample_particles(anc);
        }
        if self.cfg.rra {
            self.push_segment(batch);
            let segment: Vec<Batch> = self.segment.iter().cloned().collect();
            self.disc = rra_refit(&segment, &self.cloud, &self.sim, &self.cfg.disc)?;
        } else {
            let resid = shared_residual(batch, &self.cloud, &self.sim);
            let per_particle = (self.cfg.disc.representation == Representation::ParticleSpecific)
                .then(|| particle_residuals(batch, &self.cloud, &self.sim));
            let (next, prop) = self.disc.update(&resid, per_particle.as_ref(), &self.cfg.disc)?;
            if self.record && self.disc.variant != Variant::P {
                let transition = prop
                    .transition
                    .clone()
                    .unwrap_or_else(|| DMatrix::zeros(prop.pre.dim(), self.disc.gaussian.dim()));
                self.last_record = Some(PropagationRecord {
                    batch: 0,
                    segment_start: self.updates == 0,
                    prev: self.disc.gaussian.clone(),
                    transition,
                    pre: prop.pre.clone(),
                    g: prop.g.clone(),
                    r_eff: prop.r_eff.clone(),
                    residuals: resid.residuals.clone(),
                    eta: self.cfg.disc.eta_delta,
                    post: next.gaussian.clone(),
                });
            }
            self.disc = next;
        }
        self.updates += 1;
        Ok(())
    }
}

/// Ward PF as a BOCPD expert.
#[derive(Debug, Clone)]
pub struct WardExpert {
    pf: WardPf,
    rng: Rng,
}

impl Expert for WardExpert {
    type Forecast = BrpcForecast;

    fn forecast(&self, batch: &Batch) -> Result<BrpcForecast> {
        let law = self.pf.predict(&batch.inputs)?;
        let log_density = law.logpdf(&batch.observations)?;
        Ok(BrpcForecast { law, log_density })
    }

    fn log_density(f: &BrpcForecast) -> f64 {
        f.log_density
    }

    fn assimilate(&mut self, batch: &Batch) -> Result<()> {
        self.pf.step(batch, &mut self.rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MethodSpec {
    /// BRPC with no restart rule.
    Brpc {
        #[serde(default)]
        brpc: BrpcConfig,
    },
    BBrpc {
        #[serde(default)]
        brpc: BrpcConfig,
        #[serde(default)]
        bocpd: BocpdConfig,
    },
    BBrpcRra {
        #[serde(default)]
        brpc: BrpcConfig,
        #[serde(default)]
        bocpd: BocpdConfig,
    },
    CBrpc {
        #[serde(default)]
        brpc: BrpcConfig,
        #[serde(default)]
        wcusum: WcusumConfig,
    },
    Bc {
        #[serde(default)]
        bc: BcConfig,
    },
    WardPf {
        #[serde(default)]
        ward: WardPfConfig,
    },
    BocpdWardPf {
        #[serde(default)]
        ward: WardPfConfig,
        #[serde(default)]
        bocpd: BocpdConfig,
    },
    Enkf {
        #[serde(default)]
        enkf: EnkfConfig,
    },
}

impl MethodSpec {
    pub fn b_brpc(variant: Variant) -> Self {
        let mut brpc = BrpcConfig::default();
        brpc.disc.variant = variant;
        MethodSpec::BBrpc {
            brpc,
            bocpd: BocpdConfig::default(),
        }
    }

    pub fn c_brpc(variant: Variant) -> Self {
        let mut brpc = BrpcConfig::default();
        brpc.disc.variant = variant;
        MethodSpec::CBrpc {
            brpc,
            wcusum: WcusumConfig::default(),
        }
    }

    pub fn b_brpc_rra() -> Self {
        MethodSpec::BBrpcRra {
            brpc: BrpcConfig {
                rra: true,
                ..BrpcConfig::default()
            },
            bocpd: BocpdConfig::default(),
        }
    }

    /// BRPC-family methods produce discrepancy propagation records.
    pub fn records_propagation(&self) -> bool {
        matches!(
            self,
            MethodSpec::Brpc { .. } | MethodSpec::BBrpc { .. } | MethodSpec::CBrpc { .. }
        )
    }
}

/// What a method exposes about θ after a step: its point estimate and, for
/// ensemble methods, the weighted sample.
#[derive(Debug, Clone)]
pub struct ThetaSummary {
    pub mean: Vec<f64>,
    pub sample: Option<(Vec<f64>, Vec<Vec<f64>>)>,
}

pub struct StepOutput {
    /// Predictive law of the batch made before any state saw it.
    pub law: GaussianMixture,
    pub log_pred: f64,
    pub restart: bool,
    pub score: Option<f64>,
}

pub trait OnlineMethod: Send {
    fn step(&mut self, t: usize, batch: &Batch) -> Result<StepOutput>;
    fn theta(&self) -> ThetaSummary;
    fn last_record(&self) -> Option<PropagationRecord> {
        None
    }
}

fn cloud_summary(cloud: &ParticleCloud, theta_dim: usize) -> ThetaSummary {
    let mean = posterior_mean(cloud)[..theta_dim].to_vec();
    let values = (0..theta_dim)
        .map(|j| cloud.particles().map(|p| p[j]).collect())
        .collect();
    ThetaSummary {
        mean,
        sample: Some((cloud.weights().to_vec(), values)),
    }
}

fn expert_seed(run_seed: u64, id: usize) -> u64 {
    derive_seed(run_seed, &["expert"], id as u64)
}

struct SingleBrpc {
    cfg: Arc<BrpcConfig>,
    sim: SimulatorSpec,
    expert: BrpcExpert,
    monitor: Option<(WcusumConfig, ScoreStats)>,
    run_seed: u64,
    next_id: usize,
    record: bool,
}

impl OnlineMethod for SingleBrpc {
    fn step(&mut self, _t: usize, batch: &Batch) -> Result<StepOutput> {
        let f = self.expert.forecast(batch)?;
        let mut restart = false;
        let score = -f.log_density / batch.len() as f64;
        if let Some((cfg, stats)) = &mut self.monitor {
            let (next, fired) = wcusum_step(stats, f.log_density, batch.len(), cfg);
            *stats = next;
            restart = fired;
        }
        if restart {
            self.expert = BrpcExpert::fresh(
                self.cfg.clone(),
                self.sim,
                expert_seed(self.run_seed, self.next_id),
                self.record,
            )?;
            self.next_id += 1;
        }
        self.expert.assimilate(batch)?;
        Ok(StepOutput {
            law: f.law,
            log_pred: f.log_density,
            restart,
            score: Some(score),
        })
    }

    fn theta(&self) -> ThetaSummary {
        cloud_summary(&self.expert.cloud, self.sim.theta_dim)
    }

    fn last_record(&self) -> Option<PropagationRecord> {
        self.expert.last_record.clone()
    }
}

struct BocpdBrpc {
    cfg: Arc<BrpcConfig>,
    sim: SimulatorSpec,
    bocpd: Bocpd<BrpcExpert>,
    run_seed: u64,
    record: bool,
}

impl OnlineMethod for BocpdBrpc {
    fn step(&mut self, t: usize, batch: &Batch) -> Result<StepOutput> {
        let (cfg, sim, seed, record) = (self.cfg.clone(), self.sim, self.run_seed, self.record);
        let out = self
            .bocpd
            .step(t, batch, |id, _| BrpcExpert::fresh(cfg.clone(), sim, expert_seed(seed, id), record))?;
        let lp = out.anchor_forecast.log_density;
        Ok(StepOutput {
            law: out.anchor_forecast.law,
            log_pred: lp,
            restart: out.restarted,
            score: Some(-lp / batch.len() as f64),
        })
    }

    fn theta(&self) -> ThetaSummary {
        cloud_summary(&self.bocpd.anchor().model.cloud, self.sim.theta_dim)
    }

    fn last_record(&self) -> Option<PropagationRecord> {
        self.bocpd.anchor().model.last_record.clone()
    }
}

struct BcMethod(BcWindow);

impl OnlineMethod for BcMethod {
    fn step(&mut self, _t: usize, batch: &Batch) -> Result<StepOutput> {
        let law = self.0.predict(&batch.inputs)?;
        let log_pred = law.logpdf(&batch.observations)?;
        self.0.step(batch)?;
        Ok(StepOutput {
            law,
            log_pred,
            restart: false,
            score: None,
        })
    }

    fn theta(&self) -> ThetaSummary {
        ThetaSummary {
            mean: self.0.theta().to_vec(),
            sample: None,
        }
    }
}

struct WardMethod {
    pf: WardPf,
    rng: Rng,
    theta_dim: usize,
}

impl OnlineMethod for WardMethod {
    fn step(&mut self, _t: usize, batch: &Batch) -> Result<StepOutput> {
        let law = self.pf.predict(&batch.inputs)?;
        let log_pred = law.logpdf(&batch.observations)?;
        self.pf.step(batch, &mut self.rng)?;
        Ok(StepOutput {
            law,
            log_pred,
            restart: false,
            score: None,
        })
    }

    fn theta(&self) -> ThetaSummary {
        cloud_summary(self.pf.cloud(), self.theta_dim)
    }
}

struct BocpdWard {
    bocpd: Bocpd<WardExpert>,
    ward: WardPfConfig,
    sim: SimulatorSpec,
    run_seed: u64,
}

impl OnlineMethod for BocpdWard {
    fn step(&mut self, t: usize, batch: &Batch) -> Result<StepOutput> {
        let (ward, sim, seed) = (&self.ward, self.sim, self.run_seed);
        let out = self.bocpd.step(t, batch, |id, _| new_ward_expert(ward, sim, expert_seed(seed, id)))?;
        let lp = out.anchor_forecast.log_density;
        Ok(StepOutput {
            law: out.anchor_forecast.law,
            log_pred: lp,
            restart: out.restarted,
            score: Some(-lp / batch.len() as f64),
        })
    }

    fn theta(&self) -> ThetaSummary {
        cloud_summary(self.bocpd.anchor().model.pf.cloud(), self.sim.theta_dim)
    }
}

fn new_ward_expert(cfg: &WardPfConfig, sim: SimulatorSpec, seed: u64) -> Result<WardExpert> {
    let mut rng = crate::seed::rng_from(seed);
    let pf = WardPf::new(cfg.clone(), sim, &mut rng)?;
    Ok(WardExpert { pf, rng })
}

struct EnkfMethod {
    ens: Enkf,
    rng: Rng,
}

impl OnlineMethod for EnkfMethod {
    fn step(&mut self, _t: usize, batch: &Batch) -> Result<StepOutput> {
        let law = self.ens.predict(&batch.inputs)?;
        let log_pred = law.logpdf(&batch.observations)?;
        self.ens.step(batch, &mut self.rng)?;
        Ok(StepOutput {
            law,
            log_pred,
            restart: false,
            score: None,
        })
    }

    fn theta(&self) -> ThetaSummary {
        let m = self.ens.members();
        let p = self.ens.theta().len();
        let n = m.nrows();
        let values = (0..p).map(|j| m.column(j).iter().copied().collect()).collect();
        ThetaSummary {
            mean: self.ens.theta(),
            sample: Some((vec![1.0 / n as f64; n], values)),
        }
    }
}

/// Instantiates a method for one run. All randomness flows from `run_seed`.
pub fn build_method(
    spec: &MethodSpec,
    sim: SimulatorSpec,
    run_seed: u64,
    record: bool,
) -> Result<Box<dyn OnlineMethod>> {
    let single = |brpc: &BrpcConfig, monitor: Option<WcusumConfig>| -> Result<Box<dyn OnlineMethod>> {
        brpc.validate(&sim)?;
        let cfg = Arc::new(brpc.clone());
        let expert = BrpcExpert::fresh(cfg.clone(), sim, expert_seed(run_seed, 0), record)?;
        let monitor = match monitor {
            Some(w) => {
                w.validate()?;
                let stats = ScoreStats::new(&w);
                Some((w, stats))
            }
            None => None,
        };
        Ok(Box::new(SingleBrpc {
            cfg,
            sim,
            expert,
            monitor,
            run_seed,
            next_id: 1,
            record,
        }))
    };
    let bocpd_brpc = |brpc: &BrpcConfig, bocpd: &BocpdConfig| -> Result<Box<dyn OnlineMethod>> {
        brpc.validate(&sim)?;
        let cfg = Arc::new(brpc.clone());
        let first = BrpcExpert::fresh(cfg.clone(), sim, expert_seed(run_seed, 0), record)?;
        Ok(Box::new(BocpdBrpc {
            cfg,
            sim,
            bocpd: Bocpd::new(bocpd.clone(), first, 0)?,
            run_seed,
            record,
        }))
    };
    match spec {
        MethodSpec::Brpc { brpc } => single(brpc, None),
        MethodSpec::CBrpc { brpc, wcusum } => single(brpc, Some(wcusum.clone())),
        MethodSpec::BBrpc { brpc, bocpd } => bocpd_brpc(brpc, bocpd),
        MethodSpec::BBrpcRra { brpc, bocpd } => bocpd_brpc(
            &BrpcConfig {
                rra: true,
                ..brpc.clone()
            },
            bocpd,
        ),
        MethodSpec::Bc { bc } => Ok(Box::new(BcMethod(BcWindow::new(bc.clone(), sim)?))),
        MethodSpec::WardPf { ward } => {
            let mut rng = child_rng(run_seed, &["ward"], 0);
            let pf = WardPf::new(ward.clone(), sim, &mut rng)?;
            Ok(Box::new(WardMethod {
                pf,
                rng,
                theta_dim: sim.theta_dim,
            }))
        }
        MethodSpec::BocpdWardPf { ward, bocpd } => {
            let first = new_ward_expert(ward, sim, expert_seed(run_seed, 0))?;
            Ok(Box::new(BocpdWard {
                bocpd: Bocpd::new(bocpd.clone(), first, 0)?,
                ward: ward.clone(),
                sim,
                run_seed,
            }))
        }
        MethodSpec::Enkf { enkf } => {
            let mut rng = child_rng(run_seed, &["enkf"], 0);
            let ens = Enkf::new(enkf.clone(), sim, &mut rng)?;
            Ok(Box::new(EnkfMethod { ens, rng }))
        }
    }
}

/// Prior-state helper for replay: the discrepancy state a fresh expert starts from.
pub fn fresh_discrepancy(cfg: &BrpcConfig, sim: &SimulatorSpec) -> Result<GaussianState> {
    Ok(DiscrepancyState::fresh(&cfg.disc, sim.input_dim, cfg.particles)?.gaussian)
}

const MERGE_TOL: f64 = 0.01;

fn batch_log(t: usize, out: &StepOutput, theta: ThetaSummary, batch: &Batch, target: &[f64]) -> BatchLog {
    let law = &out.law;
    let y_pred_mean: Vec<f64> = law.mean().iter().copied().collect();
    let y_sq_err = y_pred_mean
        .iter()
        .zip(batch.observations.iter())
        .map(|(m, y)| (m - y).powi(2))
        .sum();
    let y_crps = (0..batch.len())
        .map(|j| {
            let (w, m, s) = law.marginal(j);
            let (w, m, s) = merge_components(&w, &m, &s, MERGE_TOL);
            crps_gaussian_mixture(&w, &m, &s, batch.observations[j])
        })
        .sum();
    let theta_crps = match &theta.sample {
        Some((w, values)) => {
            values.iter().zip(target).map(|(v, &y)| crps_ensemble(w, v, y)).sum::<f64>() / target.len() as f64
        }
        None => theta.mean.iter().zip(target).map(|(m, y)| (m - y).abs()).sum::<f64>() / target.len() as f64,
    };
    BatchLog {
        batch: t,
        theta_mean: theta.mean,
        theta_crps,
        y_pred_mean,
        y_sq_err,
        y_crps,
        n_obs: batch.len(),
        log_pred: out.log_pred,
        restart: out.restart,
        score: out.score,
    }
}

/// The prequential loop: each batch is scored under the pre-update law, the restart
/// rule decides, then the states assimilate it.
pub fn run_method_on_stream(spec: &MethodSpec, stream: &Stream, run_seed: u64, diagnostics: bool) -> Result<RunLog> {
    let sim = stream.simulator();
    let record = diagnostics && spec.records_propagation();
    let mut method = build_method(spec, sim, run_seed, record)?;
    let mut log = RunLog {
        entries: Vec::with_capacity(stream.records.len()),
        propagation: record.then(Vec::new),
    };
    for rec in &stream.records {
        let t = rec.batch_index;
        let batch = rec.batch();
        let out = method.step(t, &batch)?;
        log.entries.push(batch_log(t, &out, method.theta(), &batch, &rec.projected_target));
        if let (Some(props), Some(mut r)) = (log.propagation.as_mut(), method.last_record()) {
            r.batch = t;
            r.segment_start |= out.restart;
            props.push(r);
        }
    }
    Ok(log)
}
