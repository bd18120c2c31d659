//! CSV and JSON outputs.
//!
//! `steps.csv` has one row per step. With `N` robots, `M` targets and state
//! dimension `p` its columns are, in order:
//!
//! | columns | meaning |
//! |---|---|
//! | `step` | zero-based step index |
//! | `target{j}_{k}` (M·p) | true target state |
//! | `est{j}_{k}` (M·p) | filter estimate |
//! | `trace_p{j}` (M) | filter `trace(P_j)` |
//! | `trace_inv_sog` | `trace(O_Π⁻¹)` at the chosen positions |
//! | `robot{i}_{k}` (N·p) | robot positions after the move |
//! | `gamma` | sensor matrix after failures, rows joined by `\|` |
//! | `failures` | `robot:sensor` events joined by `;` |
//! | `sensors_lost` | sensors lost this step |
//! | `delta` | sensing margin after failures |
//! | `delta1_{j}` (M) | tracking slacks |
//! | `delta2` | risk slack |
//! | `objective` | controller objective |
//! | `status` | solver status |
//! | `held` | robots held position |
//! | `degraded` | no sensors were left to plan with |
//! | `observability_lost` | remaining sensors cannot observe the targets |
//!
//! for `12 + 2M(p+1) + Np` columns in total. Wall-clock timing goes to a
//! separate `timing.json` so that the CSV is reproducible byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::controller::ControllerMode;
use crate::error::{Error, Result};

use super::config::{RunMode, ScenarioConfig};
use super::experiments::{AblationResult, SweepRow};
use super::sim::RunLog;

pub const STEPS_CSV: &str = "steps.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const TIMING_JSON: &str = "timing.json";
pub const ABLATION_STEPS_CSV: &str = "ablation_steps.csv";
pub const ABLATION_RUNS_CSV: &str = "ablation_runs.csv";
pub const SWEEP_CSV: &str = "sweep.csv";

pub fn mode_name(mode: ControllerMode) -> &'static str {
    match mode {
        ControllerMode::RiskAware => "risk_aware",
        ControllerMode::NoSog => "no_sog",
    }
}

/// Number of columns of `steps.csv`.
pub fn steps_column_count(robots: usize, targets: usize, dim: usize) -> usize {
    12 + 2 * targets * (dim + 1) + robots * dim
}

pub fn steps_header(robots: usize, targets: usize, dim: usize) -> Vec<String> {
    let mut h = vec!["step".to_string()];
    for j in 0..targets {
        h.extend((0..dim).map(|k| format!("target{j}_{k}")));
    }
    for j in 0..targets {
        h.extend((0..dim).map(|k| format!("est{j}_{k}")));
    }
    h.extend((0..targets).map(|j| format!("trace_p{j}")));
    h.push("trace_inv_sog".into());
    for i in 0..robots {
        h.extend((0..dim).map(|k| format!("robot{i}_{k}")));
    }
    h.extend(["gamma", "failures", "sensors_lost", "delta"].map(String::from));
    h.extend((0..targets).map(|j| format!("delta1_{j}")));
    h.extend(
        ["delta2", "objective", "status", "held", "degraded", "observability_lost"].map(String::from),
    );
    h
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + use<> {
    let path = path.to_path_buf();
    move |source| Error::Csv {
        path: path.clone(),
        source,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_steps_csv(path: &Path, log: &RunLog, robots: usize, targets: usize, dim: usize) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_error(path);
    w.write_record(steps_header(robots, targets, dim)).map_err(&err)?;
    for r in &log.records {
        let mut row = vec![r.step.to_string()];
        row.extend(r.true_targets.iter().flatten().map(f64::to_string));
        row.extend(r.estimates.iter().flatten().map(f64::to_string));
        row.extend(r.trace_p.iter().map(f64::to_string));
        row.push(r.trace_inv_sog.to_string());
        row.extend(r.robots.iter().flatten().map(f64::to_string));
        row.push(r.gamma.to_compact());
        row.push(
            r.failures
                .iter()
                .map(|e| format!("{}:{}", e.robot, e.sensor))
                .collect::<Vec<_>>()
                .join(";"),
        );
        row.push(r.sensors_lost.to_string());
        row.push(r.delta.to_string());
        row.extend(r.delta1.iter().map(f64::to_string));
        row.push(r.delta2.to_string());
        row.push(r.objective.to_string());
        row.push(r.status.to_string());
        row.push(r.held.to_string());
        row.push(r.degraded.to_string());
        row.push(r.observability_lost.to_string());
        w.write_record(&row).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
pub struct TerminalMetrics {
    pub final_delta: f64,
    pub time_to_delta_zero: usize,
    pub delta_reached_zero: bool,
    pub final_trace_p: Vec<f64>,
    pub sensors_remaining: usize,
    pub sensors_lost: usize,
    pub first_observability_loss: Option<usize>,
    pub held_steps: usize,
    pub solver_failures: usize,
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub version: &'static str,
    pub seed: u64,
    pub mode: &'static str,
    pub steps: usize,
    pub minimal_sensor_norm: f64,
    pub initial_delta: f64,
    pub terminal: TerminalMetrics,
    /// Reloadable configuration reproducing this run.
    pub config: ScenarioConfig,
}

pub fn summarize(config: &ScenarioConfig, log: &RunLog) -> RunSummary {
    let mut echo = config.clone();
    echo.run.seed = log.options.seed;
    echo.run.steps = log.options.steps;
    echo.run.mode = match log.options.mode {
        ControllerMode::RiskAware => RunMode::RiskAware,
        ControllerMode::NoSog => RunMode::NoSog,
    };
    echo.run.failures = log.options.failures;
    echo.run.measurement_noise = log.options.measurement_noise;
    let last = log.records.last();
    RunSummary {
        version: env!("CARGO_PKG_VERSION"),
        seed: log.options.seed,
        mode: mode_name(log.options.mode),
        steps: log.records.len(),
        minimal_sensor_norm: log.minimal_norm,
        initial_delta: log.initial_delta,
        terminal: TerminalMetrics {
            final_delta: log.final_delta(),
            time_to_delta_zero: log.time_to_delta_zero(),
            delta_reached_zero: log.delta_zero_step().is_some(),
            final_trace_p: last.map(|r| r.trace_p.clone()).unwrap_or_default(),
            sensors_remaining: last.map_or(
                config.team.sensor_matrix.iter().flatten().map(|&v| usize::from(v)).sum(),
                |r| r.gamma.sensor_count(),
            ),
            sensors_lost: log.records.iter().map(|r| r.sensors_lost).sum(),
            first_observability_loss: log.first_observability_loss(),
            held_steps: log.records.iter().filter(|r| r.held).count(),
            solver_failures: log.records.iter().filter(|r| r.status == crate::optimizer::SolveStatus::Failed).count(),
        },
        config: echo,
    }
}

#[derive(Debug, Serialize)]
struct Timing {
    steps: usize,
    total_ms: f64,
    mean_ms: f64,
    max_ms: f64,
    per_step_ms: Vec<f64>,
}

/// Paths written by [`export_run`].
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub steps: PathBuf,
    pub summary: PathBuf,
    pub timing: PathBuf,
}

/// Write `steps.csv`, `summary.json` and `timing.json` into `dir`.
pub fn export_run(dir: &Path, config: &ScenarioConfig, log: &RunLog) -> Result<RunFiles> {
    ensure_dir(dir)?;
    let n = config.team.sensor_matrix.len();
    let m = config.targets.len();
    let p = config.team.sensors.first().map_or(0, |s| s.h.len());
    let files = RunFiles {
        steps: dir.join(STEPS_CSV),
        summary: dir.join(SUMMARY_JSON),
        timing: dir.join(TIMING_JSON),
    };
    write_steps_csv(&files.steps, log, n, m, p)?;
    write_json(&files.summary, &summarize(config, log))?;
    let per_step: Vec<f64> = log.records.iter().map(|r| r.wall_ms).collect();
    write_json(
        &files.timing,
        &Timing {
            steps: per_step.len(),
            total_ms: per_step.iter().sum(),
            mean_ms: log.mean_wall_ms(),
            max_ms: per_step.iter().copied().fold(0.0, f64::max),
            per_step_ms: per_step,
        },
    )?;
    Ok(files)
}

/// Long-format per-step statistics and per-run terminal metrics.
pub fn export_ablation(dir: &Path, result: &AblationResult) -> Result<(PathBuf, PathBuf)> {
    ensure_dir(dir)?;
    let steps_path = dir.join(ABLATION_STEPS_CSV);
    let mut w = csv_writer(&steps_path)?;
    let err = csv_error(&steps_path);
    w.write_record(["mode", "step", "metric", "mean", "std"]).map_err(&err)?;
    for s in &result.stats {
        let mode = mode_name(s.mode);
        for (metric, mean, std) in [
            ("total_error", s.mean_error, s.std_error),
            ("delta", s.mean_delta, s.std_delta),
        ] {
            w.write_record([mode, &s.step.to_string(), metric, &mean.to_string(), &std.to_string()])
                .map_err(&err)?;
        }
    }
    w.flush().map_err(|e| Error::io(&steps_path, e))?;

    let runs_path = dir.join(ABLATION_RUNS_CSV);
    let mut w = csv_writer(&runs_path)?;
    let err = csv_error(&runs_path);
    w.write_record(["seed", "mode", "final_delta", "time_to_delta_zero", "reached_zero", "sensors_lost"])
        .map_err(&err)?;
    for r in &result.runs {
        w.write_record([
            r.seed.to_string(),
            mode_name(r.mode).to_string(),
            r.final_delta.to_string(),
            r.time_to_delta_zero.to_string(),
            r.reached_zero.to_string(),
            r.failures.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(&runs_path, e))?;
    Ok((steps_path, runs_path))
}

pub fn export_sweep(dir: &Path, rows: &[SweepRow]) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(SWEEP_CSV);
    let mut w = csv_writer(&path)?;
    let err = csv_error(&path);
    w.write_record(["delta", "tracking_quality", "safety", "total_trace", "trace_inv_sog", "status"])
        .map_err(&err)?;
    for r in rows {
        w.write_record([
            r.delta.to_string(),
            r.tracking_quality.to_string(),
            r.safety.to_string(),
            r.total_trace.to_string(),
            r.trace_inv_sog.to_string(),
            r.status.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
