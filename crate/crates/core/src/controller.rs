//! Per-step risk-aware positioning program.
//!
//! Decision vector `z = [x_1, …, x_N, δ1_1, …, δ1_M, δ2]`. The objective
//! `w1·Δ·Σδ1 + w2·δ2²/Δ` trades tracking slack against risk slack according
//! to the current sensing margin `Δ`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{target_posterior, Estimate, TargetRows};
use crate::observability::{SogEvaluation, SogModel, DEFAULT_HORIZON};
use crate::optimizer::{self, NlpProblem, ScalarFn, SolveStatus, SolverOptions};
use crate::sensing::{SensorLibrary, SensorMatrix};
use crate::world::RiskField;

pub const DEFAULT_DELTA_FLOOR: f64 = 0.05;
/// Tolerance on motion and separation checks of a returned decision.
pub const FEASIBILITY_TOL: f64 = 1e-6;

fn default_horizon() -> usize {
    DEFAULT_HORIZON
}

fn default_delta_floor() -> f64 {
    DEFAULT_DELTA_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// Maximum travel per step.
    pub d_m: f64,
    /// Minimum inter-robot distance.
    pub d_n: f64,
    /// Per-target bound on `trace(P_j)`.
    pub rho1: Vec<f64>,
    /// Bound on `trace(O_Π⁻¹)`.
    pub rho2: f64,
    pub w1: f64,
    pub w2: f64,
    /// Gramian horizon `T`.
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_delta_floor")]
    pub delta_floor: f64,
    #[serde(default)]
    pub solver: SolverOptions,
}

impl ControllerConfig {
    pub fn validate(&self, targets: usize) -> Result<()> {
        if !(self.d_m > 0.0 && self.d_m.is_finite()) {
            return Err(Error::config("controller.d_m", "must be positive"));
        }
        if !(self.d_n >= 0.0 && self.d_n.is_finite()) {
            return Err(Error::config("controller.d_n", "must be non-negative"));
        }
        if self.rho1.len() != targets {
            return Err(Error::config(
                "controller.rho1",
                format!("expected {targets} entries, found {}", self.rho1.len()),
            ));
        }
        if self.rho1.iter().any(|&r| !(r > 0.0)) {
            return Err(Error::config("controller.rho1", "entries must be positive"));
        }
        for (key, v) in [
            ("controller.rho2", self.rho2),
            ("controller.w1", self.w1),
            ("controller.w2", self.w2),
            ("controller.delta_floor", self.delta_floor),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.horizon == 0 {
            return Err(Error::config("controller.horizon", "must be at least 1"));
        }
        self.solver.validate().map_err(|e| match e {
            Error::Config { key, message } => Error::Config {
                key: format!("controller.solver.{key}"),
                message,
            },
            other => other,
        })
    }

    pub fn effective_delta(&self, delta: f64) -> f64 {
        delta.max(self.delta_floor)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerMode {
    RiskAware,
    /// The risk constraint and its slack are removed.
    NoSog,
}

/// `k1 = w1·Δ·Σ_j δ1_j`.
pub fn cost_k1(w1: f64, delta_eff: f64, delta1: &[f64]) -> f64 {
    w1 * delta_eff * delta1.iter().sum::<f64>()
}

/// `k2 = w2·δ2²/Δ`.
pub fn cost_k2(w2: f64, delta_eff: f64, delta2: f64) -> f64 {
    w2 * delta2 * delta2 / delta_eff
}

/// Everything the controller needs for one step.
#[derive(Debug, Clone, Copy)]
pub struct StepInputs<'a> {
    /// Current robot positions `x0`.
    pub positions: &'a [DVector<f64>],
    /// Predicted target estimate and covariance for the next update.
    pub prior: &'a Estimate,
    pub gamma: &'a SensorMatrix,
    pub lib: &'a SensorLibrary,
    pub fields: &'a [RiskField],
    pub sog: &'a SogModel,
    pub config: &'a ControllerConfig,
    /// Sensing margin before clamping.
    pub delta: f64,
    pub mode: ControllerMode,
}

/// Positions of the blocks of `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub robots: usize,
    pub dim: usize,
    pub targets: usize,
    pub has_delta2: bool,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.robots * self.dim + self.targets + usize::from(self.has_delta2)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn delta1(&self, j: usize) -> usize {
        self.robots * self.dim + j
    }

    pub fn delta2(&self) -> Option<usize> {
        self.has_delta2.then(|| self.robots * self.dim + self.targets)
    }

    pub fn positions(&self, z: &DVector<f64>) -> Vec<DVector<f64>> {
        (0..self.robots)
            .map(|i| z.rows(i * self.dim, self.dim).into_owned())
            .collect()
    }

    fn pack(&self, positions: &[DVector<f64>], delta1: &[f64], delta2: f64) -> DVector<f64> {
        let mut z = DVector::zeros(self.len());
        for (i, x) in positions.iter().enumerate() {
            z.rows_mut(i * self.dim, self.dim).copy_from(x);
        }
        for (j, &d) in delta1.iter().enumerate() {
            z[self.delta1(j)] = d;
        }
        if let Some(k) = self.delta2() {
            z[k] = delta2;
        }
        z
    }

    fn scatter_positions(&self, grads: &[DVector<f64>]) -> DVector<f64> {
        let mut g = DVector::zeros(self.len());
        for (i, gi) in grads.iter().enumerate() {
            g.rows_mut(i * self.dim, self.dim).copy_from(gi);
        }
        g
    }
}

/// Shared state captured by the constraint closures.
struct Context {
    target_states: Vec<DVector<f64>>,
    target_covs: Vec<DMatrix<f64>>,
    rows: TargetRows,
    indices: Vec<Vec<usize>>,
    lib: SensorLibrary,
    fields: Vec<RiskField>,
    sog: SogModel,
    force_regularized: bool,
}

impl Context {
    fn trace_p(&self, j: usize, robots: &[DVector<f64>], grad: bool) -> (f64, Option<Vec<DVector<f64>>>) {
        let (p, g) = target_posterior(robots, &self.target_states[j], &self.target_covs[j], &self.rows, &self.lib, grad);
        (p.trace(), g)
    }

    fn sog(&self, robots: &[DVector<f64>], grad: bool) -> SogEvaluation {
        self.sog
            .evaluate_with(&self.indices, robots, &self.target_states, &self.fields, grad, self.force_regularized)
    }
}

/// The assembled per-step program.
#[derive(Debug, Clone)]
pub struct AssembledNlp {
    pub problem: NlpProblem,
    pub layout: Layout,
    pub delta_eff: f64,
    /// Whether the risk constraint uses the regularized inverse.
    pub sog_regularized: bool,
}

/// Build the per-step NLP. Fails when the team has no functional sensors;
/// [`solve_step`] turns that case into a hold-position decision.
pub fn assemble_nlp(inputs: &StepInputs<'_>) -> Result<AssembledNlp> {
    let cfg = inputs.config;
    let robots = inputs.positions.len();
    let targets = inputs.prior.targets();
    if targets == 0 {
        return Err(Error::Argument("controller needs at least one target".into()));
    }
    if robots != inputs.gamma.robots() {
        return Err(Error::Dimension {
            context: "robot positions vs sensor matrix rows",
            expected: inputs.gamma.robots(),
            actual: robots,
        });
    }
    if inputs.gamma.sensor_count() == 0 {
        return Err(Error::Argument("the team has no functional sensors".into()));
    }
    cfg.validate(targets)?;
    let dim = inputs.prior.block_dim();
    let layout = Layout {
        robots,
        dim,
        targets,
        has_delta2: inputs.mode == ControllerMode::RiskAware,
    };
    let delta_eff = cfg.effective_delta(inputs.delta);
    let indices = inputs.gamma.all_indices();
    let mut ctx = Context {
        target_states: inputs.prior.target_states(),
        target_covs: (0..targets).map(|j| inputs.prior.target_covariance(j)).collect(),
        rows: TargetRows::new(&indices, inputs.lib),
        indices,
        lib: inputs.lib.clone(),
        fields: inputs.fields.to_vec(),
        sog: inputs.sog.clone(),
        force_regularized: false,
    };
    let sog_regularized = ctx.sog(inputs.positions, false).trace_inverse.observability_lost;
    ctx.force_regularized = sog_regularized;
    let ctx = Arc::new(ctx);

    let (w1, w2) = (cfg.w1, cfg.w2);
    let objective = ScalarFn::with_gradient(
        move |z| {
            let d1: Vec<f64> = (0..layout.targets).map(|j| z[layout.delta1(j)]).collect();
            let d2 = layout.delta2().map_or(0.0, |k| z[k]);
            cost_k1(w1, delta_eff, &d1) + cost_k2(w2, delta_eff, d2)
        },
        move |z| {
            let mut g = DVector::zeros(layout.len());
            for j in 0..layout.targets {
                g[layout.delta1(j)] = w1 * delta_eff;
            }
            if let Some(k) = layout.delta2() {
                g[k] = 2.0 * w2 * z[k] / delta_eff;
            }
            g
        },
    );

    let mut problem = NlpProblem::new(layout.len(), objective);

    let d_m2 = cfg.d_m * cfg.d_m;
    for (i, x0) in inputs.positions.iter().enumerate() {
        let (xa, xb) = (x0.clone(), x0.clone());
        problem = problem.constraint(ScalarFn::with_gradient(
            move |z| (z.rows(i * dim, dim) - &xa).norm_squared() - d_m2,
            move |z| {
                let mut g = DVector::zeros(layout.len());
                g.rows_mut(i * dim, dim).copy_from(&((z.rows(i * dim, dim) - &xb) * 2.0));
                g
            },
        ));
    }

    let d_n2 = cfg.d_n * cfg.d_n;
    for a in 0..robots {
        for b in a + 1..robots {
            problem = problem.constraint(ScalarFn::with_gradient(
                move |z| d_n2 - (z.rows(a * dim, dim) - z.rows(b * dim, dim)).norm_squared(),
                move |z| {
                    let diff = z.rows(a * dim, dim) - z.rows(b * dim, dim);
                    let mut g = DVector::zeros(layout.len());
                    g.rows_mut(a * dim, dim).copy_from(&(&diff * -2.0));
                    g.rows_mut(b * dim, dim).copy_from(&(&diff * 2.0));
                    g
                },
            ));
        }
    }

    for j in 0..targets {
        let rho = cfg.rho1[j];
        let (cv, cg) = (ctx.clone(), ctx.clone());
        problem = problem.constraint(ScalarFn::with_gradient(
            move |z| cv.trace_p(j, &layout.positions(z), false).0 - rho - z[layout.delta1(j)],
            move |z| {
                let grads = cg.trace_p(j, &layout.positions(z), true).1.expect("gradient requested");
                let mut g = layout.scatter_positions(&grads);
                g[layout.delta1(j)] = -1.0;
                g
            },
        ));
    }

    if let Some(k2) = layout.delta2() {
        let rho2 = cfg.rho2;
        let (cv, cg) = (ctx.clone(), ctx);
        problem = problem.constraint(ScalarFn::with_gradient(
            move |z| cv.sog(&layout.positions(z), false).trace_inverse.value - rho2 - z[k2],
            move |z| {
                let grads = cg.sog(&layout.positions(z), true).gradient.expect("gradient requested");
                let mut g = layout.scatter_positions(&grads);
                g[k2] = -1.0;
                g
            },
        ));
    }

    let n = layout.len();
    let mut lower = DVector::from_element(n, f64::NEG_INFINITY);
    for j in 0..targets {
        lower[layout.delta1(j)] = 0.0;
    }
    if let Some(k) = layout.delta2() {
        lower[k] = 0.0;
    }
    problem = problem.bounds(lower, DVector::from_element(n, f64::INFINITY));

    Ok(AssembledNlp {
        problem,
        layout,
        delta_eff,
        sog_regularized,
    })
}

/// Outcome of one controller step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDecision {
    pub positions: Vec<Vec<f64>>,
    pub delta1: Vec<f64>,
    /// Zero when the risk constraint is disabled.
    pub delta2: f64,
    pub objective: f64,
    pub status: SolveStatus,
    /// `trace(P_j)` predicted at the chosen positions.
    pub trace_p: Vec<f64>,
    /// `trace(O_Π⁻¹)` at the chosen positions.
    pub trace_inv_sog: f64,
    /// `trace(O_Π)` at the chosen positions.
    pub trace_sog: f64,
    pub observability_lost: bool,
    /// Largest `‖x*_i - x0_i‖ - d_m`.
    pub motion_residual: f64,
    /// Largest `d_n - ‖x*_a - x*_b‖`.
    pub separation_residual: f64,
    pub delta_eff: f64,
    /// The solver result was discarded and the robots held position.
    pub held: bool,
    /// The team had no sensors; nothing was optimized.
    pub degraded: bool,
}

impl StepDecision {
    pub fn position_vectors(&self) -> Vec<DVector<f64>> {
        self.positions.iter().map(|p| DVector::from_column_slice(p)).collect()
    }
}

fn motion_residual(x0: &[DVector<f64>], x: &[DVector<f64>], d_m: f64) -> f64 {
    x0.iter()
        .zip(x)
        .map(|(a, b)| (b - a).norm() - d_m)
        .fold(f64::NEG_INFINITY, f64::max)
}

fn separation_residual(x: &[DVector<f64>], d_n: f64) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for a in 0..x.len() {
        for b in a + 1..x.len() {
            worst = worst.max(d_n - (&x[a] - &x[b]).norm());
        }
    }
    worst
}

/// Uniform sample in the ball of radius `r` around `center`.
fn sample_ball(rng: &mut ChaCha8Rng, center: &DVector<f64>, r: f64) -> DVector<f64> {
    let dir = DVector::from_iterator(center.len(), (0..center.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let norm = dir.norm();
    if norm == 0.0 {
        return center.clone();
    }
    let radius = r * rng.random::<f64>().powf(1.0 / center.len() as f64);
    center + dir * (radius / norm)
}

/// Evaluate the step metrics at `positions` and package the decision,
/// with slacks set to the constraint gaps.
fn decision_at(
    inputs: &StepInputs<'_>,
    positions: Vec<DVector<f64>>,
    status: SolveStatus,
    held: bool,
    degraded: bool,
) -> StepDecision {
    let cfg = inputs.config;
    let targets = inputs.prior.targets();
    let delta_eff = cfg.effective_delta(inputs.delta);
    let indices = inputs.gamma.all_indices();
    let rows = TargetRows::new(&indices, inputs.lib);
    let states = inputs.prior.target_states();
    let trace_p: Vec<f64> = (0..targets)
        .map(|j| {
            target_posterior(&positions, &states[j], &inputs.prior.target_covariance(j), &rows, inputs.lib, false)
                .0
                .trace()
        })
        .collect();
    let sog = inputs.sog.evaluate(&indices, &positions, &states, inputs.fields, false);
    let observability_lost = degraded || sog.trace_inverse.observability_lost;
    let delta1: Vec<f64> = trace_p
        .iter()
        .zip(&cfg.rho1)
        .map(|(t, r)| (t - r).max(0.0))
        .collect();
    let delta2 = match inputs.mode {
        ControllerMode::RiskAware => (sog.trace_inverse.value - cfg.rho2).max(0.0),
        ControllerMode::NoSog => 0.0,
    };
    let objective = cost_k1(cfg.w1, delta_eff, &delta1) + cost_k2(cfg.w2, delta_eff, delta2);
    StepDecision {
        motion_residual: motion_residual(inputs.positions, &positions, cfg.d_m),
        separation_residual: separation_residual(&positions, cfg.d_n),
        positions: positions.iter().map(|p| p.iter().copied().collect()).collect(),
        delta1,
        delta2,
        objective,
        status,
        trace_p,
        trace_inv_sog: sog.trace_inverse.value,
        trace_sog: sog.trace,
        observability_lost,
        delta_eff,
        held,
        degraded,
    }
}

/// Solve one step. Always returns motion- and separation-feasible positions
/// when `x0` is feasible: on solver failure or an infeasible solution the
/// robots hold position.
pub fn solve_step(inputs: &StepInputs<'_>) -> Result<StepDecision> {
    let cfg = inputs.config;
    if inputs.gamma.sensor_count() == 0 {
        cfg.validate(inputs.prior.targets())?;
        return Ok(decision_at(inputs, inputs.positions.to_vec(), SolveStatus::Failed, true, true));
    }
    let nlp = assemble_nlp(inputs)?;
    let layout = nlp.layout;

    let start = decision_at(inputs, inputs.positions.to_vec(), SolveStatus::Converged, false, false);
    let z0 = layout.pack(inputs.positions, &start.delta1, start.delta2);
    let mut starts = vec![z0];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.solver.multi_start_seed);
    for _ in 0..cfg.solver.multi_start {
        let moved: Vec<DVector<f64>> = inputs
            .positions
            .iter()
            .map(|x| sample_ball(&mut rng, x, cfg.d_m))
            .collect();
        starts.push(layout.pack(&moved, &start.delta1, start.delta2));
    }
    let sol = optimizer::solve_from_starts(&nlp.problem, &starts, &cfg.solver)?;

    if sol.status == SolveStatus::Failed {
        return Ok(decision_at(inputs, inputs.positions.to_vec(), sol.status, true, false));
    }
    // Pull steps that overshoot the travel radius by solver tolerance back onto it.
    let positions: Vec<DVector<f64>> = layout
        .positions(&sol.z)
        .into_iter()
        .zip(inputs.positions)
        .map(|(x, x0)| {
            let step = &x - x0;
            let len = step.norm();
            if len > cfg.d_m {
                x0 + step * (cfg.d_m / len)
            } else {
                x
            }
        })
        .collect();
    let feasible = motion_residual(inputs.positions, &positions, cfg.d_m) <= FEASIBILITY_TOL
        && separation_residual(&positions, cfg.d_n) <= FEASIBILITY_TOL;
    if !feasible {
        return Ok(decision_at(inputs, inputs.positions.to_vec(), SolveStatus::Failed, true, false));
    }
    Ok(decision_at(inputs, positions, sol.status, false, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::{check_gradients, GradientMode};
    use crate::sensing::NoiseParams;
    use proptest::prelude::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn lib() -> SensorLibrary {
        let n = NoiseParams { weight: 1.8, decay: 0.1 };
        SensorLibrary::new(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]], vec![n; 3]).unwrap()
    }

    fn field() -> RiskField {
        RiskField::gaussian(3.0, DMatrix::from_diagonal(&v(&[2.0, 2.0]))).unwrap()
    }

    struct Scene {
        positions: Vec<DVector<f64>>,
        prior: Estimate,
        gamma: SensorMatrix,
        lib: SensorLibrary,
        fields: Vec<RiskField>,
        sog: SogModel,
        config: ControllerConfig,
    }

    impl Scene {
        fn two_by_two() -> Self {
            let lib = lib();
            let config = ControllerConfig {
                d_m: 0.2,
                d_n: 0.5,
                rho1: vec![0.05, 0.05],
                rho2: 0.1,
                w1: 1.0,
                w2: 100.0,
                horizon: 1,
                delta_floor: DEFAULT_DELTA_FLOOR,
                solver: SolverOptions {
                    gradient_mode: GradientMode::Analytic,
                    ..Default::default()
                },
            };
            let cov = DMatrix::identity(2, 2) * 0.5;
            Self {
                positions: vec![v(&[0.0, -1.0]), v(&[3.0, 1.0])],
                prior: Estimate::from_blocks(&[v(&[0.0, 0.0]), v(&[3.0, 0.0])], &[cov.clone(), cov]).unwrap(),
                gamma: SensorMatrix::full(2, 3),
                sog: SogModel::new(&[DMatrix::identity(2, 2), DMatrix::identity(2, 2)], &lib, 1).unwrap(),
                lib,
                fields: vec![field(), field()],
                config,
            }
        }

        fn inputs(&self, mode: ControllerMode) -> StepInputs<'_> {
            StepInputs {
                positions: &self.positions,
                prior: &self.prior,
                gamma: &self.gamma,
                lib: &self.lib,
                fields: &self.fields,
                sog: &self.sog,
                config: &self.config,
                delta: 6f64.sqrt() - 2f64.sqrt(),
                mode,
            }
        }
    }

    #[test]
    fn cost_examples() {
        let d = 6f64.sqrt() - 2f64.sqrt();
        assert_eq!(cost_k1(1.0, d, &[0.0, 0.0]), 0.0);
        assert!((cost_k1(1.0, d, &[0.1, 0.2]) - 0.3106).abs() < 1e-4);
        assert!((cost_k1(1.0, 2.0 * d, &[0.1, 0.2]) - 2.0 * cost_k1(1.0, d, &[0.1, 0.2])).abs() < 1e-15);
        assert_eq!(cost_k2(100.0, d, 0.0), 0.0);
        assert!((cost_k2(100.0, d, 0.05) - 0.2415).abs() < 1e-4);
        assert!((cost_k2(100.0, d / 2.0, 0.05) - 2.0 * cost_k2(100.0, d, 0.05)).abs() < 1e-12);
    }

    #[test]
    fn assembled_sizes() {
        let scene = Scene::two_by_two();
        let nlp = assemble_nlp(&scene.inputs(ControllerMode::RiskAware)).unwrap();
        assert_eq!(nlp.layout.len(), 7);
        assert_eq!(nlp.problem.constraints.len(), 2 + 1 + 2 + 1);

        let ablated = assemble_nlp(&scene.inputs(ControllerMode::NoSog)).unwrap();
        assert_eq!(ablated.layout.len(), 6);
        assert_eq!(ablated.problem.constraints.len(), 5);
    }

    #[test]
    fn single_robot_has_no_pair_constraints() {
        let mut scene = Scene::two_by_two();
        scene.positions.truncate(1);
        scene.gamma = SensorMatrix::full(1, 3);
        let nlp = assemble_nlp(&scene.inputs(ControllerMode::RiskAware)).unwrap();
        assert_eq!(nlp.problem.constraints.len(), 1 + 2 + 1);
    }

    #[test]
    fn zero_separation_is_vacuous() {
        let mut scene = Scene::two_by_two();
        scene.config.d_n = 0.0;
        scene.positions = vec![v(&[1.0, 1.0]), v(&[1.0, 1.0])];
        let nlp = assemble_nlp(&scene.inputs(ControllerMode::RiskAware)).unwrap();
        let g = nlp.problem.constraints[2].value(&nlp.layout.pack(&scene.positions, &[0.0, 0.0], 0.0));
        assert!(g <= 0.0);
    }

    #[test]
    fn analytic_gradients_agree_with_differences() {
        let scene = Scene::two_by_two();
        let nlp = assemble_nlp(&scene.inputs(ControllerMode::RiskAware)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let pos: Vec<DVector<f64>> = scene.positions.iter().map(|x| sample_ball(&mut rng, x, 0.2)).collect();
            let z = nlp.layout.pack(&pos, &[0.3, 0.1], 0.2);
            let err = check_gradients(&nlp.problem, &z, 1e-5);
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn relaxed_bounds_give_zero_slack() {
        let mut scene = Scene::two_by_two();
        scene.prior = Estimate::from_blocks(
            &[v(&[100.0, 100.0]), v(&[-100.0, 100.0])],
            &[DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
        )
        .unwrap();
        scene.config.rho1 = vec![1e6, 1e6];
        scene.config.rho2 = 1e6;
        let d = solve_step(&scene.inputs(ControllerMode::RiskAware)).unwrap();
        assert!(d.delta1.iter().all(|&s| s == 0.0));
        assert_eq!(d.delta2, 0.0);
        assert!(d.objective.abs() < 1e-12);
        assert!(d.motion_residual <= FEASIBILITY_TOL);
    }

    #[test]
    fn tiny_bound_is_absorbed_by_slack() {
        let mut scene = Scene::two_by_two();
        scene.config.rho1 = vec![1e-6, 1e-6];
        let d = solve_step(&scene.inputs(ControllerMode::RiskAware)).unwrap();
        for j in 0..2 {
            assert!(d.delta1[j] > 0.0);
            assert!((d.delta1[j] - (d.trace_p[j] - 1e-6)).abs() < 1e-4);
        }
    }

    #[test]
    fn decisions_respect_motion_and_separation() {
        let scene = Scene::two_by_two();
        for mode in [ControllerMode::RiskAware, ControllerMode::NoSog] {
            let d = solve_step(&scene.inputs(mode)).unwrap();
            assert!(d.motion_residual <= FEASIBILITY_TOL, "{mode:?}");
            assert!(d.separation_residual <= FEASIBILITY_TOL, "{mode:?}");
            assert!(d.delta1.iter().all(|&s| s >= 0.0) && d.delta2 >= 0.0);
            assert!(d.status.is_success(), "{:?}", d.status);
        }
    }

    #[test]
    fn no_sensors_holds_position() {
        let mut scene = Scene::two_by_two();
        scene.gamma = SensorMatrix::from_rows(&[vec![0, 0, 0], vec![0, 0, 0]]).unwrap();
        assert!(assemble_nlp(&scene.inputs(ControllerMode::RiskAware)).is_err());
        let d = solve_step(&scene.inputs(ControllerMode::RiskAware)).unwrap();
        assert!(d.degraded && d.held);
        assert_eq!(d.position_vectors(), scene.positions);
    }

    #[test]
    fn ablation_moves_closer_to_targets() {
        let scene = Scene::two_by_two();
        let dist = |d: &StepDecision| -> f64 {
            let targets = scene.prior.target_states();
            d.position_vectors()
                .iter()
                .map(|x| targets.iter().map(|e| (x - e).norm()).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
        };
        let safe = solve_step(&scene.inputs(ControllerMode::RiskAware)).unwrap();
        let bold = solve_step(&scene.inputs(ControllerMode::NoSog)).unwrap();
        assert!(dist(&bold) < dist(&safe), "{} vs {}", dist(&bold), dist(&safe));
    }

    #[test]
    fn delta_margin_trades_slacks() {
        let cfg = Scene::two_by_two().config;
        let (lo, hi) = (cfg.effective_delta(0.5), cfg.effective_delta(1.5));
        assert!(cost_k2(cfg.w2, hi, 0.3) < cost_k2(cfg.w2, lo, 0.3));
        assert!(cost_k1(cfg.w1, hi, &[0.2, 0.0]) > cost_k1(cfg.w1, lo, &[0.2, 0.0]));
        assert_eq!(cfg.effective_delta(-1.0), DEFAULT_DELTA_FLOOR);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn objective_is_zero_only_without_slack(d1a in 0.0..2.0f64, d1b in 0.0..2.0f64, d2 in 0.0..2.0f64, delta in -1.0..3.0f64) {
            let cfg = Scene::two_by_two().config;
            let de = cfg.effective_delta(delta);
            let f = cost_k1(cfg.w1, de, &[d1a, d1b]) + cost_k2(cfg.w2, de, d2);
            prop_assert!(f >= 0.0);
            prop_assert_eq!(f == 0.0, d1a == 0.0 && d1b == 0.0 && d2 == 0.0);
        }

        #[test]
        fn slacks_never_exceed_need(x in -1.0..4.0f64, y in -2.0..2.0f64, rho in 0.01..1.0f64) {
            let mut scene = Scene::two_by_two();
            scene.positions[0] = v(&[x, y]);
            scene.positions[1] = v(&[x + 1.0, y + 0.5]);
            scene.config.rho1 = vec![rho, rho];
            let d = solve_step(&scene.inputs(ControllerMode::RiskAware)).unwrap();
            prop_assert!(d.motion_residual <= FEASIBILITY_TOL);
            prop_assert!(d.separation_residual <= FEASIBILITY_TOL);
            for j in 0..2 {
                prop_assert!(d.delta1[j] <= (d.trace_p[j] - rho).max(0.0) + 1e-4);
            }
        }
    }
}
