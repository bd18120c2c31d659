//! Small dense NLP solver: PHR augmented Lagrangian around a projected BFGS
//! inner minimizer with box bounds.
//!
//! Problems are `min f(z)` subject to `g_k(z) ≤ 0` and `lower ≤ z ≤ upper`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ValueFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// A scalar function with an optional analytic gradient.
#[derive(Clone)]
pub struct ScalarFn {
    value: ValueFn,
    gradient: Option<GradientFn>,
}

impl ScalarFn {
    pub fn new(value: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            value: Arc::new(value),
            gradient: None,
        }
    }

    pub fn with_gradient(
        value: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            value: Arc::new(value),
            gradient: Some(Arc::new(gradient)),
        }
    }

    pub fn value(&self, z: &DVector<f64>) -> f64 {
        (self.value)(z)
    }

    pub fn has_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    /// Analytic gradient when present and allowed, otherwise central differences.
    pub fn gradient(&self, z: &DVector<f64>, mode: GradientMode, h: f64) -> DVector<f64> {
        match (&self.gradient, mode) {
            (Some(g), GradientMode::Analytic) => g(z),
            _ => central_difference(&*self.value, z, h),
        }
    }
}

impl fmt::Debug for ScalarFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScalarFn")
            .field("analytic_gradient", &self.gradient.is_some())
            .finish()
    }
}

pub fn central_difference(f: &(dyn Fn(&DVector<f64>) -> f64 + Send + Sync), z: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut probe = z.clone();
    DVector::from_iterator(
        z.len(),
        (0..z.len()).map(|k| {
            let orig = probe[k];
            probe[k] = orig + h;
            let fp = f(&probe);
            probe[k] = orig - h;
            let fm = f(&probe);
            probe[k] = orig;
            (fp - fm) / (2.0 * h)
        }),
    )
}

#[derive(Debug, Clone)]
pub struct NlpProblem {
    pub objective: ScalarFn,
    /// Each entry is feasible where it is `≤ 0`.
    pub constraints: Vec<ScalarFn>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl NlpProblem {
    /// An unbounded problem of dimension `n`.
    pub fn new(n: usize, objective: ScalarFn) -> Self {
        Self {
            objective,
            constraints: Vec::new(),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn constraint(mut self, g: ScalarFn) -> Self {
        self.constraints.push(g);
        self
    }

    pub fn bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.dim();
        if n == 0 {
            return Err(Error::Argument("NLP needs at least one variable".into()));
        }
        if self.upper.len() != n {
            return Err(Error::Dimension {
                context: "NLP upper bounds",
                expected: n,
                actual: self.upper.len(),
            });
        }
        if self.lower.iter().zip(self.upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(Error::Argument("NLP lower bound exceeds upper bound".into()));
        }
        Ok(())
    }

    pub fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            z.len(),
            z.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .map(|(&v, (&l, &u))| v.clamp(l, u)),
        )
    }

    pub fn constraint_values(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.constraints.len(), self.constraints.iter().map(|g| g.value(z)))
    }
}

/// Largest positive constraint value, or zero.
pub fn max_violation(residuals: &DVector<f64>) -> f64 {
    residuals.iter().fold(0.0, |m, &g| m.max(g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    InfeasibleStartRecovered,
    Failed,
}

impl SolveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SolveStatus::Converged => "converged",
            SolveStatus::MaxIter => "max_iter",
            SolveStatus::InfeasibleStartRecovered => "infeasible_start_recovered",
            SolveStatus::Failed => "failed",
        }
    }

    pub fn is_success(self) -> bool {
        matches!(self, SolveStatus::Converged | SolveStatus::InfeasibleStartRecovered)
    }
}

impl fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol_constraint: f64,
    pub tol_gradient: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub multiplier_bound: f64,
    pub fd_step: f64,
    pub gradient_mode: GradientMode,
    /// Extra randomly perturbed starts; zero means a single solve.
    pub multi_start: usize,
    pub multi_start_seed: u64,
    /// Keep the merit value of every accepted inner step.
    pub record_merit: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_constraint: 1e-6,
            tol_gradient: 1e-6,
            max_outer: 50,
            max_inner: 500,
            initial_penalty: 1.0,
            penalty_growth: 10.0,
            multiplier_bound: 1e6,
            fd_step: 1e-5,
            gradient_mode: GradientMode::FiniteDifference,
            multi_start: 0,
            multi_start_seed: 0,
            record_merit: false,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tol_constraint", self.tol_constraint),
            ("tol_gradient", self.tol_gradient),
            ("initial_penalty", self.initial_penalty),
            ("multiplier_bound", self.multiplier_bound),
            ("fd_step", self.fd_step),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive and finite"));
            }
        }
        if !(self.penalty_growth > 1.0) {
            return Err(Error::config("penalty_growth", "must exceed 1"));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::config("max_outer", "iteration limits must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NlpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    /// Constraint values recomputed at `z`.
    pub residuals: DVector<f64>,
    pub max_violation: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Projected-gradient norm of the Lagrangian at `z`.
    pub stationarity: f64,
    pub multipliers: DVector<f64>,
    pub diagnostic: Option<String>,
    /// Accepted merit values, one vector per outer iteration.
    pub merit_history: Vec<Vec<f64>>,
}

struct AugmentedLagrangian<'a> {
    problem: &'a NlpProblem,
    lambda: DVector<f64>,
    mu: f64,
    mode: GradientMode,
    h: f64,
}

impl AugmentedLagrangian<'_> {
    fn shifted(&self, g: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            g.len(),
            g.iter().zip(self.lambda.iter()).map(|(&gk, &lk)| (lk + self.mu * gk).max(0.0)),
        )
    }

    fn value(&self, z: &DVector<f64>) -> f64 {
        let f = self.problem.objective.value(z);
        let g = self.problem.constraint_values(z);
        let s = self.shifted(&g);
        f + (s.norm_squared() - self.lambda.norm_squared()) / (2.0 * self.mu)
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut grad = self.problem.objective.gradient(z, self.mode, self.h);
        if self.problem.constraints.is_empty() {
            return grad;
        }
        let g = self.problem.constraint_values(z);
        let s = self.shifted(&g);
        for (gk, &sk) in self.problem.constraints.iter().zip(s.iter()) {
            if sk > 0.0 {
                grad += gk.gradient(z, self.mode, self.h) * sk;
            }
        }
        grad
    }
}

fn projected_gradient_norm(problem: &NlpProblem, z: &DVector<f64>, grad: &DVector<f64>) -> f64 {
    let step = problem.project(&(z - grad));
    (step - z).amax()
}

struct InnerResult {
    z: DVector<f64>,
    iterations: usize,
    failed: Option<String>,
}

const ARMIJO_C1: f64 = 1e-4;
const MIN_STEP: f64 = 1e-14;
/// Relative merit decrease below which an inner step counts as stagnant.
const STAGNANT_DECREASE: f64 = 1e-14;
/// Consecutive stagnant inner steps that end the inner solve.
const STAGNANT_INNER: usize = 10;
/// Relative move of the iterate below which an outer iteration made no progress.
const STALL_MOVE: f64 = 1e-9;
/// Consecutive feasible outer iterations without progress that end the solve.
const STALL_OUTER: usize = 3;

/// Projected BFGS on the augmented Lagrangian over the box.
fn minimize_box(
    al: &AugmentedLagrangian<'_>,
    z0: DVector<f64>,
    opts: &SolverOptions,
    tol: f64,
    merits: &mut Vec<f64>,
) -> InnerResult {
    let problem = al.problem;
    let n = z0.len();
    let mut z = z0;
    let mut val = al.value(&z);
    let mut grad = al.gradient(&z);
    if !val.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return InnerResult {
            z,
            iterations: 0,
            failed: Some("non-finite augmented Lagrangian at inner start".into()),
        };
    }
    if opts.record_merit {
        merits.push(val);
    }
    let mut hinv = DMatrix::<f64>::identity(n, n);
    let mut stagnant = 0;
    for it in 0..opts.max_inner {
        if projected_gradient_norm(problem, &z, &grad) <= tol {
            return InnerResult {
                z,
                iterations: it,
                failed: None,
            };
        }
        // Variables pinned at a bound with the gradient pushing outward stay fixed.
        let free: Vec<bool> = (0..n)
            .map(|k| {
                let at_lower = z[k] <= problem.lower[k] && grad[k] > 0.0;
                let at_upper = z[k] >= problem.upper[k] && grad[k] < 0.0;
                !(at_lower || at_upper)
            })
            .collect();
        let mut accepted = None;
        for attempt in 0..2 {
            if attempt == 1 {
                hinv = DMatrix::identity(n, n);
            }
            let mut dir = DVector::zeros(n);
            for a in 0..n {
                if free[a] {
                    dir[a] = -(0..n).filter(|&b| free[b]).map(|b| hinv[(a, b)] * grad[b]).sum::<f64>();
                }
            }
            if dir.dot(&grad) >= 0.0 {
                continue;
            }
            let mut alpha = 1.0;
            while alpha >= MIN_STEP {
                let trial = problem.project(&(&z + &dir * alpha));
                let tv = al.value(&trial);
                let decrease = grad.dot(&(&trial - &z));
                if tv.is_finite() && tv <= val + ARMIJO_C1 * decrease && decrease < 0.0 {
                    accepted = Some((trial, tv));
                    break;
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
        }
        let Some((znew, vnew)) = accepted else {
            return InnerResult {
                z,
                iterations: it,
                failed: None,
            };
        };
        let gnew = al.gradient(&znew);
        if gnew.iter().any(|g| !g.is_finite()) {
            return InnerResult {
                z,
                iterations: it,
                failed: Some("non-finite gradient".into()),
            };
        }
        let s = &znew - &z;
        let y = &gnew - &grad;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &hinv * &y;
            // BFGS inverse update: H ← (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ
            hinv += (&s * s.transpose()) * (rho + rho * rho * y.dot(&hy))
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        if val - vnew <= STAGNANT_DECREASE * (1.0 + val.abs()) {
            stagnant += 1;
        } else {
            stagnant = 0;
        }
        z = znew;
        val = vnew;
        grad = gnew;
        if stagnant >= STAGNANT_INNER {
            return InnerResult {
                z,
                iterations: it + 1,
                failed: None,
            };
        }
        if opts.record_merit {
            merits.push(val);
        }
    }
    InnerResult {
        z,
        iterations: opts.max_inner,
        failed: None,
    }
}

fn failed_solution(problem: &NlpProblem, z: DVector<f64>, message: String) -> NlpSolution {
    let residuals = problem.constraint_values(&z);
    NlpSolution {
        objective: problem.objective.value(&z),
        max_violation: max_violation(&residuals),
        residuals,
        z,
        status: SolveStatus::Failed,
        outer_iterations: 0,
        inner_iterations: 0,
        stationarity: f64::NAN,
        multipliers: DVector::zeros(problem.constraints.len()),
        diagnostic: Some(message),
        merit_history: Vec::new(),
    }
}

fn lagrangian_stationarity(problem: &NlpProblem, z: &DVector<f64>, lambda: &DVector<f64>, opts: &SolverOptions) -> f64 {
    let mut grad = problem.objective.gradient(z, opts.gradient_mode, opts.fd_step);
    for (g, &l) in problem.constraints.iter().zip(lambda.iter()) {
        if l > 0.0 {
            grad += g.gradient(z, opts.gradient_mode, opts.fd_step) * l;
        }
    }
    projected_gradient_norm(problem, z, &grad)
}

/// Solve from a single warm start. Deterministic in its inputs.
pub fn solve_single(problem: &NlpProblem, z0: &DVector<f64>, opts: &SolverOptions) -> Result<NlpSolution> {
    problem.validate()?;
    opts.validate()?;
    if z0.len() != problem.dim() {
        return Err(Error::Dimension {
            context: "NLP warm start",
            expected: problem.dim(),
            actual: z0.len(),
        });
    }
    let mut z = problem.project(z0);
    let f0 = problem.objective.value(&z);
    let g0 = problem.constraint_values(&z);
    if !f0.is_finite() || g0.iter().any(|g| !g.is_finite()) {
        return Ok(failed_solution(problem, z, "non-finite objective or constraint at the start".into()));
    }
    let infeasible_start = max_violation(&g0) > opts.tol_constraint;

    let m = problem.constraints.len();
    let mut al = AugmentedLagrangian {
        problem,
        lambda: DVector::zeros(m),
        mu: opts.initial_penalty,
        mode: opts.gradient_mode,
        h: opts.fd_step,
    };
    let mut history = Vec::new();
    let mut inner_total = 0;
    let mut prev_violation = f64::INFINITY;
    let mut converged = false;
    let mut outer = 0;
    let mut stationarity = f64::INFINITY;
    let mut stalled = 0;
    let mut diagnostic = None;
    while outer < opts.max_outer {
        outer += 1;
        let mut merits = Vec::new();
        // Early outer iterations only need a rough inner solve.
        let tol = opts.tol_gradient.max(10f64.powi(-(outer as i32)));
        let inner = minimize_box(&al, z.clone(), opts, tol, &mut merits);
        inner_total += inner.iterations;
        if opts.record_merit {
            history.push(merits);
        }
        if let Some(msg) = inner.failed {
            let mut sol = failed_solution(problem, inner.z, msg);
            sol.outer_iterations = outer;
            sol.inner_iterations = inner_total;
            sol.merit_history = history;
            return Ok(sol);
        }
        let moved = (&inner.z - &z).amax();
        z = inner.z;
        let g = problem.constraint_values(&z);
        let bound = opts.multiplier_bound;
        al.lambda = DVector::from_iterator(
            m,
            g.iter()
                .zip(al.lambda.iter())
                .map(|(&gk, &lk)| (lk + al.mu * gk).clamp(0.0, bound)),
        );
        let violation = max_violation(&g);
        stationarity = lagrangian_stationarity(problem, &z, &al.lambda, opts);
        if violation <= opts.tol_constraint && stationarity <= opts.tol_gradient {
            converged = true;
            break;
        }
        if violation <= opts.tol_constraint && moved <= STALL_MOVE * (1.0 + z.amax()) {
            stalled += 1;
            if stalled >= STALL_OUTER {
                diagnostic = Some(format!("stalled at stationarity {stationarity:.3e}"));
                break;
            }
        } else {
            stalled = 0;
        }
        if violation > opts.tol_constraint && violation > 0.25 * prev_violation.min(1.0) {
            al.mu *= opts.penalty_growth;
        }
        prev_violation = violation;
    }

    let residuals = problem.constraint_values(&z);
    let objective = problem.objective.value(&z);
    if !objective.is_finite() || residuals.iter().any(|g| !g.is_finite()) {
        return Ok(failed_solution(problem, z, "non-finite objective or constraint at the solution".into()));
    }
    let status = match (converged, infeasible_start) {
        (true, false) => SolveStatus::Converged,
        (true, true) => SolveStatus::InfeasibleStartRecovered,
        (false, _) => SolveStatus::MaxIter,
    };
    Ok(NlpSolution {
        objective,
        max_violation: max_violation(&residuals),
        residuals,
        z,
        status,
        outer_iterations: outer,
        inner_iterations: inner_total,
        stationarity,
        multipliers: al.lambda,
        diagnostic,
        merit_history: history,
    })
}

/// Solve from `z0` and, when `opts.multi_start > 0`, from that many extra
/// starts drawn by perturbing `z0` uniformly within `radius` per coordinate.
pub fn solve(problem: &NlpProblem, z0: &DVector<f64>, opts: &SolverOptions, radius: f64) -> Result<NlpSolution> {
    let mut starts = vec![z0.clone()];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.multi_start_seed);
    for _ in 0..opts.multi_start {
        starts.push(DVector::from_iterator(
            z0.len(),
            z0.iter().map(|&v| v + rng.random_range(-radius..=radius)),
        ));
    }
    solve_from_starts(problem, &starts, opts)
}

/// Solve from every start and keep the best: feasible beats infeasible,
/// then lower objective, then earlier start.
pub fn solve_from_starts(problem: &NlpProblem, starts: &[DVector<f64>], opts: &SolverOptions) -> Result<NlpSolution> {
    if starts.is_empty() {
        return Err(Error::Argument("at least one start point is required".into()));
    }
    let solutions = starts
        .par_iter()
        .map(|z0| solve_single(problem, z0, opts))
        .collect::<Result<Vec<_>>>()?;
    let rank = |s: &NlpSolution| {
        let feasible = s.status != SolveStatus::Failed && s.max_violation <= opts.tol_constraint;
        (!feasible, s.objective)
    };
    let mut best = 0;
    for (k, s) in solutions.iter().enumerate().skip(1) {
        let (a, b) = (rank(s), rank(&solutions[best]));
        if a.0 < b.0 || (a.0 == b.0 && a.1 < b.1) {
            best = k;
        }
    }
    Ok(solutions.into_iter().nth(best).expect("non-empty"))
}

/// Worst relative discrepancy between analytic gradients and central
/// differences over the objective and all constraints that carry one.
pub fn check_gradients(problem: &NlpProblem, z: &DVector<f64>, h: f64) -> f64 {
    std::iter::once(&problem.objective)
        .chain(&problem.constraints)
        .filter_map(|f| {
            let analytic = f.gradient.as_ref()?(z);
            let numeric = central_difference(&*f.value, z, h);
            let scale = analytic.norm().max(numeric.norm()).max(1e-6);
            Some((analytic - numeric).norm() / scale)
        })
        .fold(0.0, f64::max)
}
