use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use brpc::harness::{aggregate, generate_streams, read_summary, run_experiment, write_aggregate, ExperimentConfig};
use brpc::metrics::{gamma_replay, RunLog};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "brpc", version, about = "Online calibration experiments with restart detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the streams of every (scenario, seed) cell as CSV.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<output_dir>/streams`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every (scenario, method, seed) cell of an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; defaults to all cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Recompute and print the aggregate table of a finished run directory.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Replay the propagation diagnostic of one recorded run log.
    ReplayGamma {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    if let Ok(s) = std::env::var("BRPC_SEED") {
        cfg.master_seed = s.trim().parse().map_err(|e| format!("BRPC_SEED={s:?}: {e}"))?;
    }
    Ok(cfg)
}

fn show(x: Option<f64>) -> String {
    x.map_or("-".to_string(), |v| format!("{v:.4}"))
}

fn summarize(dir: &Path) -> Result<(), String> {
    let rows = read_summary(&dir.join("summary.csv")).map_err(|e| e.to_string())?;
    let agg = aggregate(&rows);
    write_aggregate(&dir.join("aggregate.csv"), &agg).map_err(|e| e.to_string())?;
    println!(
        "{:<14} {:<14} {:>4} {:>17} {:>17} {:>17} {:>8} {:>7} {:>7}",
        "scenario", "method", "runs", "theta_rmse", "y_rmse", "y_crps", "restarts", "prec@2", "rec@2"
    );
    for a in &agg {
        let pm = |m: brpc::harness::MeanSd| format!("{:.4}±{:.4}", m.mean, m.sd);
        println!(
            "{:<14} {:<14} {:>4} {:>17} {:>17} {:>17} {:>8.2} {:>7} {:>7}",
            a.scenario,
            a.method,
            a.runs,
            pm(a.theta_rmse),
            pm(a.y_rmse),
            pm(a.y_crps),
            a.restarts.mean,
            show(a.precision2.map(|m| m.mean)),
            show(a.recall2.map(|m| m.mean)),
        );
    }
    Ok(())
}

fn replay(path: &Path) -> Result<(), String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let log: RunLog = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let g = gamma_replay(&log).map_err(|e| e.to_string())?;
    let out = serde_json::json!({
        "steps": g.steps.len(),
        "median_gamma_prior": g.median_prior,
        "max_gamma_prior": g.max_prior,
        "frac_gamma_prior_le_1": g.frac_prior_le_one,
        "median_gamma_post": g.median_post,
        "max_gamma_post": g.max_post,
        "per_batch": g.steps.iter().map(|(b, p, q)| serde_json::json!({"batch": b, "gamma_prior": p, "gamma_post": q})).collect::<Vec<_>>(),
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json values serialize"));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { config, out } => load_config(&config).and_then(|cfg| {
            let dir = out.unwrap_or_else(|| cfg.output_dir.join("streams"));
            let paths = generate_streams(&cfg, &dir).map_err(|e| e.to_string())?;
            println!("wrote {} streams to {}", paths.len(), dir.display());
            Ok(())
        }),
        Command::Run { config, jobs } => load_config(&config).and_then(|cfg| {
            let report = run_experiment(&cfg, jobs).map_err(|e| e.to_string())?;
            for f in &report.failures {
                eprintln!("failed: {} {} seed {}: {}", f.scenario, f.method, f.seed, f.error);
            }
            println!(
                "{} of {} runs succeeded; results in {}",
                report.rows.len(),
                report.manifest.runs.len(),
                cfg.output_dir.display()
            );
            if report.all_succeeded() {
                summarize(&cfg.output_dir)
            } else {
                Err(format!("{} runs failed", report.failures.len()))
            }
        }),
        Command::Summarize { input } => summarize(&input),
        Command::ReplayGamma { run } => replay(&run),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
