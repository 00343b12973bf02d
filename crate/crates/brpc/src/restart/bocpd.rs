//! Restarted BOCPD over BRPC experts.
//!
//! Each step spawns a fresh expert, scores every expert on the incoming batch with
//! its pre-update predictive law, reweights, applies the hard-restart rule against
//! the anchor, prunes, and only then lets the retained experts assimilate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hazard;
use crate::error::{BrpcError, Result};
use crate::gaussian::log_sum_exp;
use crate::stream::Batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BocpdConfig {
    pub hazard_scale: f64,
    pub margin: f64,
    /// Minimum spacing of two restarts, in batches.
    pub cooldown: usize,
    pub max_experts: usize,
}

impl Default for BocpdConfig {
    fn default() -> Self {
        BocpdConfig {
            hazard_scale: 200.0,
            margin: 1.0,
            cooldown: 10,
            max_experts: 5,
        }
    }
}

impl BocpdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hazard_scale >= 0.0) {
            return Err(BrpcError::invalid("hazard scale must be nonnegative"));
        }
        if !(self.margin >= 1.0) {
            return Err(BrpcError::invalid("restart margin must be at least 1"));
        }
        if self.max_experts == 0 {
            return Err(BrpcError::invalid("max_experts must be positive"));
        }
        Ok(())
    }
}

/// A restart hypothesis that can forecast a batch and then absorb it.
pub trait Expert: Send + Sync {
    type Forecast: Send;
    fn forecast(&self, batch: &Batch) -> Result<Self::Forecast>;
    fn log_density(forecast: &Self::Forecast) -> f64;
    fn assimilate(&mut self, batch: &Batch) -> Result<()>;
}

#[derive(Debug, Clone)]
pub struct ExpertSlot<E> {
    pub id: usize,
    pub start: usize,
    pub weight: f64,
    pub model: E,
}

#[derive(Debug)]
pub struct BocpdOutcome<F> {
    pub restarted: bool,
    pub underflow: bool,
    /// Forecast of the anchor in force before the batch was seen.
    pub anchor_forecast: F,
    /// `(expert id, pre-update log density)` for every candidate, fresh expert last.
    pub log_densities: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct Bocpd<E> {
    pub cfg: BocpdConfig,
    experts: Vec<ExpertSlot<E>>,
    anchor: usize,
    next_id: usize,
    last_restart: Option<usize>,
}

impl<E: Expert> Bocpd<E> {
    /// Starts with a single anchor expert launched at `start`.
    pub fn new(cfg: BocpdConfig, initial: E, start: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Bocpd {
            cfg,
            experts: vec![ExpertSlot {
                id: 0,
                start,
                weight: 1.0,
                model: initial,
            }],
            anchor: 0,
            next_id: 1,
            last_restart: None,
        })
    }

    pub fn experts(&self) -> &[ExpertSlot<E>] {
        &self.experts
    }

    pub fn anchor(&self) -> &ExpertSlot<E> {
        self.experts.iter().find(|e| e.id == self.anchor).expect("anchor is always retained")
    }

    pub fn last_restart(&self) -> Option<usize> {
        self.last_restart
    }

    fn cooling(&self, t: usize) -> bool {
        self.last_restart.is_some_and(|l| t - l < self.cfg.cooldown)
    }

    /// Processes batch `t`. `spawn(id, t)` builds the fresh expert for this step.
    pub fn step(
        &mut self,
        t: usize,
        batch: &Batch,
        mut spawn: impl FnMut(usize, usize) -> Result<E>,
    ) -> Result<BocpdOutcome<E::Forecast>> {
        let anchor_start = self.anchor().start;
        let h = hazard(t.saturating_sub(anchor_start), self.cfg.hazard_scale);
        let n_old = self.experts.len();
        if self.experts.iter().all(|e| e.start != t) {
            let id = self.next_id;
            self.next_id += 1;
            self.experts.push(ExpertSlot {
                id,
                start: t,
                weight: 0.0,
                model: spawn(id, t)?,
            });
        }
        let forecasts: Vec<E::Forecast> = self
            .experts
            .par_iter()
            .map(|e| e.model.forecast(batch))
            .collect::<Result<_>>()?;
        let log_dens: Vec<f64> = forecasts.iter().map(E::log_density).collect();

        let logw: Vec<f64> = self
            .experts
            .iter()
            .zip(&log_dens)
            .enumerate()
            .map(|(i, (e, lp))| {
                if i < n_old {
                    (1.0 - h).ln() + e.weight.ln() + lp
                } else {
                    h.ln() + lp
                }
            })
            .collect();
        let lse = log_sum_exp(&logw);
        let underflow = !lse.is_finite();
        if underflow {
            let n = self.experts.len() as f64;
            self.experts.iter_mut().for_each(|e| e.weight = 1.0 / n);
        } else {
            for (e, lw) in self.experts.iter_mut().zip(&logw) {
                e.weight = (lw - lse).exp();
            }
        }

        let anchor_idx = self.experts.iter().position(|e| e.id == self.anchor).expect("anchor present");
        let mut restarted = false;
        if !underflow && !self.cooling(t) {
            let anchor_w = self.experts[anchor_idx].weight;
            let best = self
                .experts
                .iter()
                .filter(|e| e.start > anchor_start)
                .fold(None::<&ExpertSlot<E>>, |b, e| match b {
                    Some(b) if b.weight >= e.weight => Some(b),
                    _ => Some(e),
                });
            if let Some(best) = best {
                if best.weight > self.cfg.margin * anchor_w {
                    self.anchor = best.id;
                    self.last_restart = Some(t);
                    restarted = true;
                }
            }
        }

        let anchor_forecast = {
            let mut fs: Vec<Option<E::Forecast>> = forecasts.into_iter().map(Some).collect();
            fs[anchor_idx].take().expect("anchor forecast")
        };
        let log_densities = self.experts.iter().map(|e| e.id).zip(log_dens).collect();

        self.prune();
        self.experts
            .par_iter_mut()
            .map(|e| e.model.assimilate(batch))
            .collect::<Result<Vec<()>>>()?;
        Ok(BocpdOutcome {
            restarted,
            underflow,
            anchor_forecast,
            log_densities,
        })
    }

    /// Keeps the `max_experts` heaviest experts, always including the anchor, and
    /// renormalizes.
    fn prune(&mut self) {
        if self.experts.len() > self.cfg.max_experts {
            let mut order: Vec<usize> = (0..self.experts.len()).collect();
            order.sort_by(|&a, &b| {
                let (ea, eb) = (&self.experts[a], &self.experts[b]);
                (eb.id == self.anchor)
                    .cmp(&(ea.id == self.anchor))
                    .then(eb.weight.total_cmp(&ea.weight))
                    .then(ea.id.cmp(&eb.id))
            });
            let mut keep = order[..self.cfg.max_experts].to_vec();
            keep.sort_unstable();
            let mut i = 0;
            self.experts.retain(|_| {
                let k = keep.binary_search(&i).is_ok();
                i += 1;
                k
            });
        }
        let total: f64 = self.experts.iter().map(|e| e.weight).sum();
        if total > 0.0 {
            self.experts.iter_mut().for_each(|e| e.weight /= total);
        } else {
            let n = self.experts.len() as f64;
            self.experts.iter_mut().for_each(|e| e.weight = 1.0 / n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::SupportSet;
    use nalgebra::DVector;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Expert whose log density is scripted per start time; counts updates.
    #[derive(Clone)]
    struct Scripted {
        log_density: Arc<dyn Fn(usize) -> f64 + Send + Sync>,
        updates: Arc<AtomicUsize>,
        seen_updates_at_forecast: Arc<AtomicUsize>,
        batches: usize,
    }

    impl Expert for Scripted {
        type Forecast = f64;
        fn forecast(&self, _batch: &Batch) -> Result<f64> {
            self.seen_updates_at_forecast
                .fetch_max(self.updates.load(Ordering::SeqCst), Ordering::SeqCst);
            Ok((self.log_density)(self.batches))
        }
        fn log_density(f: &f64) -> f64 {
            *f
        }
        fn assimilate(&mut self, _batch: &Batch) -> Result<()> {
            self.updates.fetch_add(1, Ordering::SeqCst);
            self.batches += 1;
            Ok(())
        }
    }

    fn batch() -> Batch {
        Batch::new(SupportSet::from_scalars(&[0.5]), DVector::from_element(1, 0.0)).unwrap()
    }

    fn flat(updates: &Arc<AtomicUsize>, seen: &Arc<AtomicUsize>) -> Scripted {
        Scripted {
            log_density: Arc::new(|_| 0.0),
            updates: updates.clone(),
            seen_updates_at_forecast: seen.clone(),
            batches: 0,
        }
    }

    #[test]
    fn equal_densities_split_by_hazard() {
        let u = Arc::new(AtomicUsize::new(0));
        let s = Arc::new(AtomicUsize::new(0));
        let cfg = BocpdConfig {
            hazard_scale: 1.0,
            max_experts: 10,
            ..Default::default()
        };
        let mut b2 = Bocpd::new(cfg, flat(&u, &s), 0).unwrap();
        let out = b2.step(1, &batch(), |_, _| Ok(flat(&u, &s))).unwrap();
        assert_eq!(b2.experts().len(), 2);
        assert!((b2.experts()[1].weight - 0.5).abs() < 1e-15);
        assert!(!out.underflow);
        let sum: f64 = b2.experts().iter().map(|e| e.weight).sum();
        assert!((sum - 1.0).abs() < 1e-15);
    }

    #[test]
    fn dominant_fresh_expert_restarts_at_once() {
        let u = Arc::new(AtomicUsize::new(0));
        let s = Arc::new(AtomicUsize::new(0));
        let mut b = Bocpd::new(BocpdConfig::default(), flat(&u, &s), 0).unwrap();
        let mut fired = None;
        for t in 1..4 {
            let out = b
                .step(t, &batch(), |_, _| {
                    Ok(Scripted {
                        log_density: Arc::new(|_| 1e6f64.ln()),
                        ..flat(&u, &s)
                    })
                })
                .unwrap();
            if out.restarted && fired.is_none() {
                fired = Some(t);
            }
        }
        assert_eq!(fired, Some(1));
        assert_eq!(b.anchor().start, 1);
    }

    #[test]
    fn infinite_margin_never_restarts() {
        let u = Arc::new(AtomicUsize::new(0));
        let s = Arc::new(AtomicUsize::new(0));
        let cfg = BocpdConfig {
            margin: f64::INFINITY,
            ..Default::default()
        };
        let mut b = Bocpd::new(cfg, flat(&u, &s), 0).unwrap();
        for t in 1..20 {
            let out = b
                .step(t, &batch(), |_, _| {
                    Ok(Scripted {
                        log_density: Arc::new(|_| 50.0),
                        ..flat(&u, &s)
                    })
                })
                .unwrap();
            assert!(!out.restarted);
            assert!(b.experts().len() <= 5);
            assert!(b.experts().iter().any(|e| e.id == 0));
        }
    }

    #[test]
    fn anchor_holding_most_mass_is_kept() {
        let u = Arc::new(AtomicUsize::new(0));
        let s = Arc::new(AtomicUsize::new(0));
        let mut b = Bocpd::new(BocpdConfig::default(), flat(&u, &s), 0).unwrap();
        for t in 1..30 {
            let out = b.step(t, &batch(), |_, _| Ok(flat(&u, &s))).unwrap();
            assert!(!out.restarted);
        }
        assert_eq!(b.anchor().id, 0);
    }

    #[test]
    fn cooldown_spaces_restarts() {
        let u = Arc::new(AtomicUsize::new(0));
        let s = Arc::new(AtomicUsize::new(0));
        let cfg = BocpdConfig {
            cooldown: 3,
            ..Default::default()
        };
        let mut b = Bocpd::new(cfg, flat(&u, &s), 0).unwrap();
        let mut fired = Vec::new();
        for t in 1..15 {
            // every fresh expert beats every older one by a wide margin on its first batch
            let out = b
                .step(t, &batch(), |_, _| {
                    Ok(Scripted {
                        log_density: Arc::new(|seen| if seen == 0 { 30.0 } else { 0.0 }),
                        ..flat(&u, &s)
                    })
                })
                .unwrap();
            if out.restarted {
                fired.push(t);
            }
        }
        assert!(!fired.is_empty());
        for w in fired.windows(2) {
            assert!(w[1] - w[0] >= 3, "{fired:?}");
        }
        assert!(fired.windows(2).any(|w| w[1] - w[0] == 3), "{fired:?}");
    }

    #[test]
    fn densities_are_scored_before_any_update() {
        let u = Arc::new(AtomicUsize::new(0));
        let s = Arc::new(AtomicUsize::new(0));
        let mut b = Bocpd::new(BocpdConfig::default(), flat(&u, &s), 0).unwrap();
        for t in 1..6 {
            let before = u.load(Ordering::SeqCst);
            s.store(0, Ordering::SeqCst);
            b.step(t, &batch(), |_, _| Ok(flat(&u, &s))).unwrap();
            assert_eq!(s.load(Ordering::SeqCst), before);
        }
    }
}
