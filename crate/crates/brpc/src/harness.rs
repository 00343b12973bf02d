//! Scenario × method × seed sweeps with deterministic seeding and CSV output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{run_method_on_stream, MethodSpec};
use crate::error::{BrpcError, Result};
use crate::metrics::{event_metrics, theta_rmse, RunLog};
use crate::seed::derive_seed;
use crate::stream::{gen_stream, Stream, StreamConfig};

pub const EVENT_TOL: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: String,
    #[serde(flatten)]
    pub stream: StreamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEntry {
    pub id: String,
    #[serde(flatten)]
    pub spec: MethodSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub master_seed: u64,
    pub scenarios: Vec<ScenarioSpec>,
    pub methods: Vec<MethodEntry>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub diagnostics: bool,
    pub output_dir: PathBuf,
}

fn check_id(kind: &str, id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(BrpcError::invalid(format!(
            "{kind} id {id:?} must be nonempty and use only letters, digits, '-', '_' or '.'"
        )))
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err(BrpcError::invalid("scenarios, methods and seeds must all be nonempty"));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.scenarios {
            check_id("scenario", &s.id)?;
            if !seen.insert(("s", s.id.as_str())) {
                return Err(BrpcError::invalid(format!("duplicate scenario id {:?}", s.id)));
            }
            s.stream.validate()?;
        }
        for m in &self.methods {
            check_id("method", &m.id)?;
            if !seen.insert(("m", m.id.as_str())) {
                return Err(BrpcError::invalid(format!("duplicate method id {:?}", m.id)));
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(BrpcError::invalid("duplicate seeds"));
        }
        Ok(())
    }

    /// Every method sees the same stream within a (scenario, seed) cell.
    pub fn stream_seed(&self, scenario: &str, seed: u64) -> u64 {
        derive_seed(self.master_seed, &[scenario, "stream"], seed)
    }

    pub fn run_seed(&self, scenario: &str, method: &str, seed: u64) -> u64 {
        derive_seed(self.master_seed, &[scenario, method], seed)
    }

    pub fn stream_config(&self, scenario: &ScenarioSpec, seed: u64) -> StreamConfig {
        StreamConfig {
            seed: self.stream_seed(&scenario.id, seed),
            ..scenario.stream.clone()
        }
    }
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub theta_rmse: f64,
    pub theta_crps: f64,
    pub y_rmse: f64,
    pub y_crps: f64,
    pub restarts: usize,
    pub precision2: Option<f64>,
    pub recall2: Option<f64>,
    pub f1_2: Option<f64>,
    pub delay2: Option<f64>,
    pub runtime_s: f64,
}

impl RunRow {
    pub fn from_log(scenario: &str, method: &str, seed: u64, stream: &Stream, log: &RunLog, runtime_s: f64) -> Result<Self> {
        let restarts = log.restart_batches();
        let cps = stream.changepoints();
        let annotated = stream.config.family.nominal_changepoints() != Some(0) || !cps.is_empty();
        let ev = event_metrics(&restarts, &cps, EVENT_TOL);
        let ev_or_none = |v: Option<f64>| if annotated { v } else { None };
        Ok(RunRow {
            scenario: scenario.to_string(),
            method: method.to_string(),
            seed,
            theta_rmse: theta_rmse(&log.theta_estimates(), &stream.targets())?,
            theta_crps: log.theta_crps(),
            y_rmse: log.y_rmse(),
            y_crps: log.y_crps(),
            restarts: restarts.len(),
            precision2: ev_or_none(ev.precision),
            recall2: ev_or_none(ev.recall),
            f1_2: ev_or_none(ev.f1),
            delay2: ev_or_none(ev.delay),
            runtime_s,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRun {
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub stream_seed: u64,
    pub run_seed: u64,
    pub runtime_s: f64,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub seed_derivation: String,
    pub config: ExperimentConfig,
    pub runs: Vec<ManifestRun>,
    pub failures: Vec<CellFailure>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<RunRow>,
    pub failures: Vec<CellFailure>,
    pub manifest: RunManifest,
}

impl ExperimentReport {
    pub fn all_succeeded(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Numbers are written with 17 significant digits.
pub fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_num).unwrap_or_default()
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BrpcError {
    BrpcError::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub const SUMMARY_HEADER: [&str; 13] = [
    "scenario", "method", "seed", "theta_rmse", "theta_crps", "y_rmse", "y_crps", "restarts", "precision2", "recall2",
    "f1_2", "delay2", "runtime_s",
];

pub fn write_summary(path: &Path, rows: &[RunRow]) -> Result<()> {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| (&a.scenario, &a.method, a.seed).cmp(&(&b.scenario, &b.method, b.seed)));
    write_csv(
        path,
        &SUMMARY_HEADER,
        rows.iter().map(|r| {
            vec![
                r.scenario.clone(),
                r.method.clone(),
                r.seed.to_string(),
                fmt_num(r.theta_rmse),
                fmt_num(r.theta_crps),
                fmt_num(r.y_rmse),
                fmt_num(r.y_crps),
                r.restarts.to_string(),
                fmt_opt(r.precision2),
                fmt_opt(r.recall2),
                fmt_opt(r.f1_2),
                fmt_opt(r.delay2),
                fmt_num(r.runtime_s),
            ]
        }),
    )
}

pub fn read_summary(path: &Path) -> Result<Vec<RunRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        if rec.len() != SUMMARY_HEADER.len() {
            return Err(io_err(path, format!("expected {} columns, found {}", SUMMARY_HEADER.len(), rec.len())));
        }
        let num = |i: usize| -> Result<f64> { rec[i].parse().map_err(|e| io_err(path, format!("column {}: {e}", SUMMARY_HEADER[i]))) };
        let opt = |i: usize| -> Result<Option<f64>> { if rec[i].is_empty() { Ok(None) } else { num(i).map(Some) } };
        rows.push(RunRow {
            scenario: rec[0].to_string(),
            method: rec[1].to_string(),
            seed: rec[2].parse().map_err(|e| io_err(path, format!("seed: {e}")))?,
            theta_rmse: num(3)?,
            theta_crps: num(4)?,
            y_rmse: num(5)?,
            y_crps: num(6)?,
            restarts: rec[7].parse().map_err(|e| io_err(path, format!("restarts: {e}")))?,
            precision2: opt(8)?,
            recall2: opt(9)?,
            f1_2: opt(10)?,
            delay2: opt(11)?,
            runtime_s: num(12)?,
        });
    }
    Ok(rows)
}

/// Mean and sample sd of one metric over the seeds of a scenario × method group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

fn mean_sd(values: impl IntoIterator<Item = f64>) -> Option<MeanSd> {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanSd { mean, sd, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub scenario: String,
    pub method: String,
    pub runs: usize,
    pub theta_rmse: MeanSd,
    pub theta_crps: MeanSd,
    pub y_rmse: MeanSd,
    pub y_crps: MeanSd,
    pub restarts: MeanSd,
    pub precision2: Option<MeanSd>,
    pub recall2: Option<MeanSd>,
    pub f1_2: Option<MeanSd>,
    pub delay2: Option<MeanSd>,
}

/// Groups by (scenario, method) in sorted order. Runtime is left out so that
/// reruns produce identical aggregates.
pub fn aggregate(rows: &[RunRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, String), Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.scenario.clone(), r.method.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((scenario, method), g)| {
            let req = |f: fn(&RunRow) -> f64| mean_sd(g.iter().map(|r| f(r))).expect("group is nonempty");
            let opt = |f: fn(&RunRow) -> Option<f64>| mean_sd(g.iter().filter_map(|r| f(r)));
            AggregateRow {
                scenario,
                method,
                runs: g.len(),
                theta_rmse: req(|r| r.theta_rmse),
                theta_crps: req(|r| r.theta_crps),
                y_rmse: req(|r| r.y_rmse),
                y_crps: req(|r| r.y_crps),
                restarts: req(|r| r.restarts as f64),
                precision2: opt(|r| r.precision2),
                recall2: opt(|r| r.recall2),
                f1_2: opt(|r| r.f1_2),
                delay2: opt(|r| r.delay2),
            }
        })
        .collect()
}

pub fn write_aggregate(path: &Path, agg: &[AggregateRow]) -> Result<()> {
    let metrics = ["theta_rmse", "theta_crps", "y_rmse", "y_crps", "restarts", "precision2", "recall2", "f1_2", "delay2"];
    let mut header = vec!["scenario".to_string(), "method".to_string(), "runs".to_string()];
    for m in metrics {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_sd"));
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        path,
        &header,
        agg.iter().map(|a| {
            let mut row = vec![a.scenario.clone(), a.method.clone(), a.runs.to_string()];
            for v in [
                Some(a.theta_rmse),
                Some(a.theta_crps),
                Some(a.y_rmse),
                Some(a.y_crps),
                Some(a.restarts),
                a.precision2,
                a.recall2,
                a.f1_2,
                a.delay2,
            ] {
                row.push(fmt_opt(v.map(|m| m.mean)));
                row.push(fmt_opt(v.map(|m| m.sd)));
            }
            row
        }),
    )
}

pub fn run_file_stem(scenario: &str, method: &str, seed: u64) -> String {
    format!("{scenario}__{method}__seed{seed}")
}

fn write_run_csv(path: &Path, stream: &Stream, log: &RunLog) -> Result<()> {
    let p = log.entries.first().map_or(0, |e| e.theta_mean.len());
    let mut header: Vec<String> = vec!["batch".into()];
    header.extend((0..p).map(|j| format!("theta_mean_{j}")));
    header.extend((0..p).map(|j| format!("theta_target_{j}")));
    for h in ["theta_crps", "y_sq_err", "y_crps", "n_obs", "log_pred", "score", "restart", "changepoint"] {
        header.push(h.into());
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        path,
        &header,
        log.entries.iter().zip(&stream.records).map(|(e, rec)| {
            let mut row = vec![e.batch.to_string()];
            row.extend(e.theta_mean.iter().map(|&v| fmt_num(v)));
            row.extend(rec.projected_target.iter().map(|&v| fmt_num(v)));
            row.push(fmt_num(e.theta_crps));
            row.push(fmt_num(e.y_sq_err));
            row.push(fmt_num(e.y_crps));
            row.push(e.n_obs.to_string());
            row.push(fmt_num(e.log_pred));
            row.push(fmt_opt(e.score));
            row.push(u8::from(e.restart).to_string());
            row.push(u8::from(rec.is_changepoint).to_string());
            row
        }),
    )
}

/// Per-batch stream dump: one row per observation.
pub fn write_stream_csv(path: &Path, stream: &Stream) -> Result<()> {
    let d = stream.records.first().map_or(1, |r| r.inputs.dim());
    let p = stream.records.first().map_or(1, |r| r.projected_target.len());
    let mut header: Vec<String> = vec!["batch".into()];
    header.extend((0..d).map(|j| format!("x_{j}")));
    header.push("y".into());
    header.push("zeta".into());
    header.extend((0..p).map(|j| format!("theta_target_{j}")));
    header.push("changepoint".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = stream.records.iter().flat_map(|rec| {
        (0..rec.observations.len()).map(move |i| {
            let mut row = vec![rec.batch_index.to_string()];
            row.extend(rec.inputs.point(i).iter().map(|&v| fmt_num(v)));
            row.push(fmt_num(rec.observations[i]));
            row.push(fmt_num(rec.zeta[i]));
            row.extend(rec.projected_target.iter().map(|&v| fmt_num(v)));
            row.push(u8::from(rec.is_changepoint).to_string());
            row
        })
    });
    write_csv(path, &header, rows)
}

struct Cell<'a> {
    scenario: &'a ScenarioSpec,
    method: &'a MethodEntry,
    seed: u64,
    stream: &'a Stream,
}

struct CellOutcome {
    run: ManifestRun,
    result: std::result::Result<(RunRow, RunLog), String>,
}

fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> CellOutcome {
    let run_seed = cfg.run_seed(&cell.scenario.id, &cell.method.id, cell.seed);
    let t0 = Instant::now();
    let result = run_method_on_stream(&cell.method.spec, cell.stream, run_seed, cfg.diagnostics).and_then(|log| {
        let runtime = t0.elapsed().as_secs_f64();
        let row = RunRow::from_log(&cell.scenario.id, &cell.method.id, cell.seed, cell.stream, &log, runtime)?;
        Ok((row, log))
    });
    let runtime_s = t0.elapsed().as_secs_f64();
    CellOutcome {
        run: ManifestRun {
            scenario: cell.scenario.id.clone(),
            method: cell.method.id.clone(),
            seed: cell.seed,
            stream_seed: cfg.stream_seed(&cell.scenario.id, cell.seed),
            run_seed,
            runtime_s,
            ok: result.is_ok(),
        },
        result: result.map_err(|e| e.to_string()),
    }
}

fn in_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| BrpcError::invalid(e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Runs every (scenario, method, seed) cell and writes per-run CSVs, the summary,
/// the aggregate and the manifest under `cfg.output_dir`. Failed cells are recorded
/// and the others continue. `jobs` bounds the worker threads.
pub fn run_experiment(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<ExperimentReport> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let runs_dir = out.join("runs");
    fs::create_dir_all(&runs_dir).map_err(|e| io_err(&runs_dir, e))?;

    let stream_keys: Vec<(&ScenarioSpec, u64)> =
        cfg.scenarios.iter().flat_map(|s| cfg.seeds.iter().map(move |&k| (s, k))).collect();
    let streams: Vec<Result<Stream>> = in_pool(jobs, || {
        stream_keys.par_iter().map(|(s, k)| gen_stream(&cfg.stream_config(s, *k))).collect()
    })?;

    let mut failures = Vec::new();
    let mut cells = Vec::new();
    let mut manifest_runs = Vec::new();
    for ((scenario, seed), stream) in stream_keys.iter().zip(&streams) {
        match stream {
            Ok(stream) => {
                for method in &cfg.methods {
                    cells.push(Cell {
                        scenario,
                        method,
                        seed: *seed,
                        stream,
                    });
                }
            }
            Err(e) => {
                for method in &cfg.methods {
                    failures.push(CellFailure {
                        scenario: scenario.id.clone(),
                        method: method.id.clone(),
                        seed: *seed,
                        error: format!("stream generation failed: {e}"),
                    });
                    manifest_runs.push(ManifestRun {
                        scenario: scenario.id.clone(),
                        method: method.id.clone(),
                        seed: *seed,
                        stream_seed: cfg.stream_seed(&scenario.id, *seed),
                        run_seed: cfg.run_seed(&scenario.id, &method.id, *seed),
                        runtime_s: 0.0,
                        ok: false,
                    });
                }
            }
        }
    }

    let outcomes: Vec<CellOutcome> = in_pool(jobs, || cells.par_iter().map(|c| run_cell(cfg, c)).collect())?;

    let mut rows = Vec::new();
    for (cell, outcome) in cells.iter().zip(outcomes) {
        manifest_runs.push(outcome.run);
        match outcome.result {
            Ok((row, log)) => {
                let stem = run_file_stem(&cell.scenario.id, &cell.method.id, cell.seed);
                write_run_csv(&runs_dir.join(format!("{stem}.csv")), cell.stream, &log)?;
                if log.propagation.is_some() {
                    let p = runs_dir.join(format!("{stem}.runlog.json"));
                    let text = serde_json::to_string(&log).map_err(|e| io_err(&p, e))?;
                    fs::write(&p, text).map_err(|e| io_err(&p, e))?;
                }
                rows.push(row);
            }
            Err(error) => failures.push(CellFailure {
                scenario: cell.scenario.id.clone(),
                method: cell.method.id.clone(),
                seed: cell.seed,
                error,
            }),
        }
    }
    rows.sort_by(|a, b| (&a.scenario, &a.method, a.seed).cmp(&(&b.scenario, &b.method, b.seed)));
    manifest_runs.sort_by(|a, b| (&a.scenario, &a.method, a.seed).cmp(&(&b.scenario, &b.method, b.seed)));
    failures.sort_by(|a, b| (&a.scenario, &a.method, a.seed).cmp(&(&b.scenario, &b.method, b.seed)));

    write_summary(&out.join("summary.csv"), &rows)?;
    write_aggregate(&out.join("aggregate.csv"), &aggregate(&rows))?;
    let manifest = RunManifest {
        engine_version: env!("CARGO_PKG_VERSION").to_string(),
        seed_derivation: "stream: sha256(master, [scenario, \"stream\"], seed); run: sha256(master, [scenario, method], seed); expert k of a run: sha256(run, [\"expert\"], k)".to_string(),
        config: cfg.clone(),
        runs: manifest_runs,
        failures: failures.clone(),
    };
    let mpath = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&mpath, e))?;
    fs::write(&mpath, text).map_err(|e| io_err(&mpath, e))?;

    Ok(ExperimentReport {
        rows,
        failures,
        manifest,
    })
}

/// Writes every (scenario, seed) stream of the config as CSV under `dir`.
pub fn generate_streams(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut paths = Vec::new();
    for s in &cfg.scenarios {
        for &k in &cfg.seeds {
            let stream = gen_stream(&cfg.stream_config(s, k))?;
            let p = dir.join(format!("{}__seed{k}.csv", s.id));
            write_stream_csv(&p, &stream)?;
            paths.push(p);
        }
    }
    Ok(paths)
}
