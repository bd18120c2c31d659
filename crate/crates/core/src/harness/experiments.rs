//! Batch drivers: paired ablation over seeds and the sensing-margin sweep.

use rayon::prelude::*;

use crate::controller::{solve_step, ControllerMode, StepInputs};
use crate::error::{Error, Result};
use crate::estimation::predict;
use crate::optimizer::SolveStatus;

use super::config::Scenario;
use super::sim::{run_with, RunOptions};

/// Terminal metrics and per-step traces of one run in an ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub seed: u64,
    pub mode: ControllerMode,
    pub final_delta: f64,
    /// First step with the margin exhausted, censored at the run length.
    pub time_to_delta_zero: usize,
    pub reached_zero: bool,
    pub failures: usize,
    /// `Σ_j trace(P_j)` per step.
    pub total_error: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Across-seed statistics at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationStats {
    pub mode: ControllerMode,
    pub step: usize,
    pub mean_error: f64,
    pub std_error: f64,
    pub mean_delta: f64,
    pub std_delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    /// Sorted by seed, risk-aware before ablated for each seed.
    pub runs: Vec<AblationRun>,
    pub stats: Vec<AblationStats>,
}

pub const ABLATION_MODES: [ControllerMode; 2] = [ControllerMode::RiskAware, ControllerMode::NoSog];

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    (xs.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

impl AblationResult {
    pub fn runs_for(&self, mode: ControllerMode) -> impl Iterator<Item = &AblationRun> {
        self.runs.iter().filter(move |r| r.mode == mode)
    }

    pub fn mean_final_delta(&self, mode: ControllerMode) -> f64 {
        mean(&self.runs_for(mode).map(|r| r.final_delta).collect::<Vec<_>>())
    }

    pub fn median_time_to_delta_zero(&self, mode: ControllerMode) -> f64 {
        median(self.runs_for(mode).map(|r| r.time_to_delta_zero as f64).collect())
    }

    /// Mean across-seed variance of total tracking error over the last
    /// quarter of the steps.
    pub fn final_quarter_error_variance(&self, mode: ControllerMode) -> f64 {
        let stats: Vec<&AblationStats> = self.stats.iter().filter(|s| s.mode == mode).collect();
        let start = stats.len() - stats.len() / 4;
        let tail = &stats[start.min(stats.len().saturating_sub(1))..];
        mean(&tail.iter().map(|s| s.std_error * s.std_error).collect::<Vec<_>>())
    }
}

/// Run every seed in both controller modes. Seeds run in parallel; results
/// come back sorted by seed.
pub fn run_ablation(s: &Scenario, seeds: &[u64], steps: usize) -> Result<AblationResult> {
    if seeds.len() < 2 {
        return Err(Error::Argument("an ablation needs at least two seeds".into()));
    }
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    seeds.dedup();
    let jobs: Vec<(u64, ControllerMode)> = seeds
        .iter()
        .flat_map(|&seed| ABLATION_MODES.map(|mode| (seed, mode)))
        .collect();
    let base = RunOptions::from_scenario(s);
    let runs = jobs
        .par_iter()
        .map(|&(seed, mode)| {
            let log = run_with(
                s,
                &RunOptions {
                    seed,
                    steps,
                    mode,
                    ..base
                },
            )?;
            Ok(AblationRun {
                seed,
                mode,
                final_delta: log.final_delta(),
                time_to_delta_zero: log.time_to_delta_zero(),
                reached_zero: log.delta_zero_step().is_some(),
                failures: log.records.iter().map(|r| r.sensors_lost).sum(),
                total_error: log.records.iter().map(|r| r.total_trace()).collect(),
                delta: log.records.iter().map(|r| r.delta).collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut stats = Vec::with_capacity(2 * steps);
    for mode in ABLATION_MODES {
        let group: Vec<&AblationRun> = runs.iter().filter(|r| r.mode == mode).collect();
        for step in 0..steps {
            let err: Vec<f64> = group.iter().map(|r| r.total_error[step]).collect();
            let del: Vec<f64> = group.iter().map(|r| r.delta[step]).collect();
            stats.push(AblationStats {
                mode,
                step,
                mean_error: mean(&err),
                std_error: std_dev(&err),
                mean_delta: mean(&del),
                std_delta: std_dev(&del),
            });
        }
    }
    Ok(AblationResult { runs, stats })
}

/// One row of the margin sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub delta: f64,
    /// `1 / Σ_j trace(P_j)` at the chosen positions.
    pub tracking_quality: f64,
    /// `trace(O_Π)` at the chosen positions.
    pub safety: f64,
    pub total_trace: f64,
    pub trace_inv_sog: f64,
    pub positions: Vec<Vec<f64>>,
    pub status: SolveStatus,
}

/// Solve a single risk-aware controller step from the configured initial
/// state for each forced margin. No randomness is involved.
pub fn run_delta_sweep(s: &Scenario, deltas: &[f64]) -> Result<Vec<SweepRow>> {
    if let Some(bad) = deltas.iter().find(|&&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::Argument(format!("sweep margins must be positive, got {bad}")));
    }
    let prior = predict(&s.initial_estimate, &s.a_team, &s.q_team)?;
    deltas
        .par_iter()
        .map(|&delta| {
            let d = solve_step(&StepInputs {
                positions: &s.robots,
                prior: &prior,
                gamma: &s.gamma,
                lib: &s.lib,
                fields: &s.fields,
                sog: &s.sog,
                config: &s.config.controller,
                delta,
                mode: ControllerMode::RiskAware,
            })?;
            let total_trace: f64 = d.trace_p.iter().sum();
            Ok(SweepRow {
                delta,
                tracking_quality: 1.0 / total_trace,
                safety: d.trace_sog,
                total_trace,
                trace_inv_sog: d.trace_inv_sog,
                positions: d.positions,
                status: d.status,
            })
        })
        .collect()
}
