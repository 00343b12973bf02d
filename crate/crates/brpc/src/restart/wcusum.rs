//! Window-limited CUSUM on standardized prequential scores.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{BrpcError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WcusumConfig {
    pub window: usize,
    pub threshold: f64,
    pub kappa: f64,
    pub sigma_min: f64,
    pub warmup: usize,
}

impl Default for WcusumConfig {
    fn default() -> Self {
        WcusumConfig {
            window: 4,
            threshold: 0.25,
            kappa: 0.25,
            sigma_min: 0.25,
            warmup: 3,
        }
    }
}

impl WcusumConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || !(self.threshold > 0.0) || !(self.kappa >= 0.0) || !(self.sigma_min > 0.0) {
            return Err(BrpcError::invalid(
                "wCUSUM needs a positive window, threshold and sd floor and a nonnegative drift allowance",
            ));
        }
        Ok(())
    }
}

/// `max_{m ≤ W} √m (mean of the last m values − κ)₊` over a sliding buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStat {
    window: usize,
    kappa: f64,
    buffer: VecDeque<f64>,
}

impl WindowStat {
    pub fn new(window: usize, kappa: f64) -> Self {
        WindowStat {
            window,
            kappa,
            buffer: VecDeque::with_capacity(window),
        }
    }

    pub fn push(&mut self, standardized: f64) -> f64 {
        if self.buffer.len() == self.window {
            self.buffer.pop_front();
        }
        self.buffer.push_back(standardized);
        self.value()
    }

    pub fn value(&self) -> f64 {
        let mut best = 0.0_f64;
        let mut sum = 0.0;
        for (k, v) in self.buffer.iter().rev().enumerate() {
            sum += v;
            let m = (k + 1) as f64;
            best = best.max(m.sqrt() * (sum / m - self.kappa).max(0.0));
        }
        best
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn clear(&mut self) {
        self.buffer.clear();
    }
}

/// Score history of the current segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub history: Vec<f64>,
    pub window: WindowStat,
    pub statistic: f64,
}

impl ScoreStats {
    pub fn new(cfg: &WcusumConfig) -> Self {
        ScoreStats {
            history: Vec::new(),
            window: WindowStat::new(cfg.window, cfg.kappa),
            statistic: 0.0,
        }
    }

    /// Running mean and unbiased sd of the history, `σ̂ = σ_min` below two entries.
    pub fn running(&self, sigma_min: f64) -> Option<(f64, f64)> {
        let n = self.history.len();
        if n == 0 {
            return None;
        }
        let mean = self.history.iter().sum::<f64>() / n as f64;
        let sd = if n < 2 {
            sigma_min
        } else {
            (self.history.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Some((mean, sd))
    }

    pub fn standardize(&self, score: f64, sigma_min: f64) -> f64 {
        match self.running(sigma_min) {
            None => 0.0,
            Some((mean, sd)) => (score - mean) / sd.max(sigma_min),
        }
    }
}

/// Scores the batch and decides on a restart. Warm-up scores only seed the running
/// mean and sd. On restart the returned stats are empty: the triggering score
/// belonged to the discarded segment.
pub fn wcusum_step(stats: &ScoreStats, pre_log_density: f64, k: usize, cfg: &WcusumConfig) -> (ScoreStats, bool) {
    let score = -pre_log_density / k as f64;
    let z = stats.standardize(score, cfg.sigma_min);
    let mut next = stats.clone();
    let warm = next.history.len() >= cfg.warmup;
    next.history.push(score);
    if !warm {
        return (next, false);
    }
    next.statistic = next.window.push(z);
    if next.statistic > cfg.threshold {
        (ScoreStats::new(cfg), true)
    } else {
        (next, false)
    }
}
