//! The closed tracking loop.
//!
//! Each step, in this order: advance the targets, measure them from the
//! current robot positions, run the filter, solve the controller program,
//! move the robots, then roll for target-induced sensor failures at the new
//! positions and recompute the sensing margin. Random draws therefore happen
//! in the order process noise, measurement noise, detection coins, failed
//! sensor choice, all from one seeded generator.

use std::time::Instant;

use crate::controller::{solve_step, ControllerMode, StepInputs};
use crate::error::Result;
use crate::estimation::{predict, update};
use crate::observability::sensing_margin;
use crate::optimizer::SolveStatus;
use crate::sensing::{apply_failures, build_measurement_model, team_noise_covariance, FailureEvent, SensorMatrix};
use crate::world::WorldState;

use super::config::Scenario;

/// Margins at or below this count as exhausted.
pub const DELTA_ZERO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub seed: u64,
    pub steps: usize,
    pub mode: ControllerMode,
    pub failures: bool,
    pub measurement_noise: bool,
}

impl RunOptions {
    pub fn from_scenario(s: &Scenario) -> Self {
        let run = &s.config.run;
        Self {
            seed: run.seed,
            steps: run.steps,
            mode: run.mode.controller_mode(),
            failures: run.failures,
            measurement_noise: run.measurement_noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub true_targets: Vec<Vec<f64>>,
    pub estimates: Vec<Vec<f64>>,
    /// Filter `trace(P_j)` after this step's update.
    pub trace_p: Vec<f64>,
    /// `trace(O_Π⁻¹)` at the chosen positions, before this step's failures.
    pub trace_inv_sog: f64,
    /// Robot positions after the move.
    pub robots: Vec<Vec<f64>>,
    /// Sensor matrix after this step's failures.
    pub gamma: SensorMatrix,
    pub failures: Vec<FailureEvent>,
    pub sensors_lost: usize,
    /// Sensing margin after this step's failures.
    pub delta: f64,
    pub delta1: Vec<f64>,
    pub delta2: f64,
    pub objective: f64,
    pub status: SolveStatus,
    pub held: bool,
    pub degraded: bool,
    /// The remaining sensors no longer make the targets observable.
    pub observability_lost: bool,
    pub kf_regularized: bool,
    pub motion_residual: f64,
    pub separation_residual: f64,
    /// Wall-clock time of the step; not part of the deterministic outputs.
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn total_trace(&self) -> f64 {
        self.trace_p.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub options: RunOptions,
    pub minimal_norm: f64,
    pub initial_delta: f64,
    pub records: Vec<StepRecord>,
}

impl RunLog {
    pub fn final_delta(&self) -> f64 {
        self.records.last().map_or(self.initial_delta, |r| r.delta)
    }

    /// First step whose margin is exhausted, if any.
    pub fn delta_zero_step(&self) -> Option<usize> {
        self.records.iter().position(|r| r.delta <= DELTA_ZERO_TOL)
    }

    /// [`RunLog::delta_zero_step`] censored at the run length.
    pub fn time_to_delta_zero(&self) -> usize {
        self.delta_zero_step().unwrap_or(self.records.len())
    }

    pub fn first_observability_loss(&self) -> Option<usize> {
        self.records.iter().position(|r| r.observability_lost)
    }

    /// Observability was lost before the last step.
    pub fn degraded_early(&self) -> bool {
        self.first_observability_loss()
            .is_some_and(|k| k + 1 < self.records.len())
    }

    pub fn mean_wall_ms(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.wall_ms).sum::<f64>() / self.records.len() as f64
    }
}

pub fn run_scenario(s: &Scenario) -> Result<RunLog> {
    run_with(s, &RunOptions::from_scenario(s))
}

pub fn run_with(s: &Scenario, opts: &RunOptions) -> Result<RunLog> {
    let m = s.target_count();
    let cfg = &s.config.controller;
    let minimal_norm = s.minimal.frobenius_norm();
    let mut world = WorldState::new(s.robots.clone(), s.initial_targets.clone(), opts.seed);
    let mut gamma = s.gamma.clone();
    let mut est = s.initial_estimate.clone();
    let initial_delta = sensing_margin(&gamma, minimal_norm);
    let mut delta = initial_delta;
    let mut records = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let started = Instant::now();
        world.step_targets(&s.targets)?;

        let prior = predict(&est, &s.a_team, &s.q_team)?;
        let mm = build_measurement_model(&gamma, &s.lib, m)?;
        let mut kf_regularized = false;
        est = if mm.has_measurements() {
            let y = world.generate_measurements(&mm, &s.lib, opts.measurement_noise);
            let r = team_noise_covariance(&world.robot_positions, &prior.target_states(), &gamma, &s.lib)?;
            let out = update(&prior, &y, &mm.team, &r)?;
            kf_regularized = out.regularized;
            out.estimate
        } else {
            prior
        };

        let next_prior = predict(&est, &s.a_team, &s.q_team)?;
        let decision = solve_step(&StepInputs {
            positions: &world.robot_positions,
            prior: &next_prior,
            gamma: &gamma,
            lib: &s.lib,
            fields: &s.fields,
            sog: &s.sog,
            config: cfg,
            delta,
            mode: opts.mode,
        })?;
        world.robot_positions = decision.position_vectors();

        let events = if opts.failures {
            world.simulate_failures(&gamma, &s.fields)
        } else {
            Vec::new()
        };
        let before = gamma.sensor_count();
        let outcome = apply_failures(&gamma, &events);
        gamma = outcome.matrix;
        let sensors_lost = before - gamma.sensor_count();
        delta = sensing_margin(&gamma, minimal_norm);

        let observability_lost = gamma.sensor_count() == 0
            || s.sog
                .evaluate(&gamma.all_indices(), &world.robot_positions, &est.target_states(), &s.fields, false)
                .trace_inverse
                .observability_lost;

        records.push(StepRecord {
            step,
            true_targets: world.targets.iter().map(|e| e.iter().copied().collect()).collect(),
            estimates: est.target_states().iter().map(|e| e.iter().copied().collect()).collect(),
            trace_p: (0..m).map(|j| est.target_covariance(j).trace()).collect(),
            trace_inv_sog: decision.trace_inv_sog,
            robots: decision.positions.clone(),
            gamma: gamma.clone(),
            failures: outcome.applied,
            sensors_lost,
            delta,
            delta1: decision.delta1,
            delta2: decision.delta2,
            objective: decision.objective,
            status: decision.status,
            held: decision.held,
            degraded: decision.degraded,
            observability_lost,
            kf_regularized,
            motion_residual: decision.motion_residual,
            separation_residual: decision.separation_residual,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }

    Ok(RunLog {
        options: *opts,
        minimal_norm,
        initial_delta,
        records,
    })
}
