//! Ground truth: target motion, risk fields, measurements and failures.
//!
//! The world owns one seeded RNG. Within a simulation step the draws happen
//! in a fixed order: process noise, measurement noise, detection coins,
//! failed-sensor choice. Two runs with the same seed see the same noise up to
//! the point where their robot trajectories diverge.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, min_eigenvalue, psd_sqrt};
use crate::sensing::{information_diagonal, FailureEvent, MeasurementModel, SensorLibrary, SensorMatrix};

/// Smallest risk value fed to the immunity log.
pub const RISK_FLOOR: f64 = 1e-12;

/// Gaussian detection field centred on a target:
/// `φ(x) = c / (2π|Σ|) · exp(-½ (x-e)ᵀ Σ (x-e))`, clamped to `[0, 1]`.
///
/// `Σ` enters the exponent directly, so larger entries mean a tighter field.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskField {
    scale: f64,
    shape: DMatrix<f64>,
    peak: f64,
}

impl RiskField {
    pub fn gaussian(scale: f64, shape: DMatrix<f64>) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::Argument("risk scale must be finite and non-negative".into()));
        }
        if !is_symmetric(&shape, 1e-12) {
            return Err(Error::Argument("risk shape matrix must be square and symmetric".into()));
        }
        if min_eigenvalue(&shape) <= 0.0 {
            return Err(Error::Argument("risk shape matrix must be positive definite".into()));
        }
        let peak = scale / (2.0 * PI * shape.determinant());
        if peak > 1.0 {
            return Err(Error::Argument(format!(
                "risk field peak {peak} exceeds 1; not a probability"
            )));
        }
        Ok(Self { scale, shape, peak })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    /// Value at the centre.
    pub fn peak(&self) -> f64 {
        self.peak
    }

    pub fn dim(&self) -> usize {
        self.shape.nrows()
    }

    fn quadratic(&self, x: &DVector<f64>, center: &DVector<f64>) -> f64 {
        let d = x - center;
        d.dot(&(&self.shape * &d))
    }

    /// Detection probability at `x` for a target at `center`.
    pub fn risk(&self, x: &DVector<f64>, center: &DVector<f64>) -> f64 {
        (self.peak * (-0.5 * self.quadratic(x, center)).exp()).clamp(0.0, 1.0)
    }

    /// `π = -ln(max(φ, RISK_FLOOR))`.
    pub fn immunity(&self, x: &DVector<f64>, center: &DVector<f64>) -> f64 {
        -self.risk(x, center).max(RISK_FLOOR).ln()
    }

    /// Gradient of [`RiskField::immunity`] with respect to `x`. Zero where the
    /// floor or the clamp is active.
    pub fn immunity_gradient(&self, x: &DVector<f64>, center: &DVector<f64>) -> DVector<f64> {
        let phi = self.peak * (-0.5 * self.quadratic(x, center)).exp();
        if phi > RISK_FLOOR && phi < 1.0 {
            &self.shape * (x - center)
        } else {
            DVector::zeros(x.len())
        }
    }
}

/// How a target picks its control input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlPolicy {
    Constant { input: Vec<f64> },
    /// Piecewise-constant input; each segment applies from its `start` step
    /// until the next segment begins. Before the first segment the input is zero.
    Schedule { segments: Vec<ScheduleSegment> },
    /// Head toward each waypoint in turn at `speed` per step.
    Waypoints {
        points: Vec<Vec<f64>>,
        speed: f64,
        #[serde(default)]
        cyclic: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSegment {
    pub start: u64,
    pub input: Vec<f64>,
}

impl ControlPolicy {
    pub fn input_dim(&self) -> Option<usize> {
        match self {
            ControlPolicy::Constant { input } => Some(input.len()),
            ControlPolicy::Schedule { segments } => segments.first().map(|s| s.input.len()),
            ControlPolicy::Waypoints { points, .. } => points.first().map(|p| p.len()),
        }
    }

    fn input(&self, step: u64, state: &DVector<f64>, cursor: &mut usize, q_dim: usize) -> DVector<f64> {
        match self {
            ControlPolicy::Constant { input } => DVector::from_column_slice(input),
            ControlPolicy::Schedule { segments } => segments
                .iter()
                .rev()
                .find(|s| s.start <= step)
                .map(|s| DVector::from_column_slice(&s.input))
                .unwrap_or_else(|| DVector::zeros(q_dim)),
            ControlPolicy::Waypoints {
                points,
                speed,
                cyclic,
            } => {
                if points.is_empty() || *cursor >= points.len() {
                    return DVector::zeros(q_dim);
                }
                let goal = DVector::from_column_slice(&points[*cursor]);
                let to_goal = goal - state;
                let dist = to_goal.norm();
                if dist <= *speed {
                    *cursor += 1;
                    if *cyclic && *cursor == points.len() {
                        *cursor = 0;
                    }
                    to_goal
                } else {
                    to_goal * (*speed / dist)
                }
            }
        }
    }
}

/// One-step linear target model `e' = A e + B u + w`, `w ~ N(0, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub policy: ControlPolicy,
    q_sqrt: DMatrix<f64>,
}

impl TargetModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>, policy: ControlPolicy) -> Result<Self> {
        let p = a.nrows();
        if !a.is_square() {
            return Err(Error::Argument("process matrix A must be square".into()));
        }
        if b.nrows() != p {
            return Err(Error::Dimension {
                context: "control matrix rows",
                expected: p,
                actual: b.nrows(),
            });
        }
        if q.shape() != (p, p) {
            return Err(Error::Dimension {
                context: "process noise covariance side",
                expected: p,
                actual: q.nrows(),
            });
        }
        if !is_symmetric(&q, 1e-12) || min_eigenvalue(&q) < -1e-12 {
            return Err(Error::Argument("process noise covariance must be symmetric PSD".into()));
        }
        if let Some(dim) = policy.input_dim() {
            let expected = match policy {
                ControlPolicy::Waypoints { .. } => p,
                _ => b.ncols(),
            };
            if dim != expected {
                return Err(Error::Dimension {
                    context: "target control input",
                    expected,
                    actual: dim,
                });
            }
        }
        let q_sqrt = psd_sqrt(&q);
        Ok(Self {
            a,
            b,
            q,
            policy,
            q_sqrt,
        })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

/// Mutable ground-truth state.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub robot_positions: Vec<DVector<f64>>,
    pub targets: Vec<DVector<f64>>,
    pub time_step: u64,
    rng: ChaCha8Rng,
    waypoint_cursor: Vec<usize>,
}

impl WorldState {
    pub fn new(robot_positions: Vec<DVector<f64>>, targets: Vec<DVector<f64>>, seed: u64) -> Self {
        let m = targets.len();
        Self {
            robot_positions,
            targets,
            time_step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            waypoint_cursor: vec![0; m],
        }
    }

    /// Stacked target state `e`.
    pub fn stacked_targets(&self) -> DVector<f64> {
        let values: Vec<f64> = self.targets.iter().flat_map(|e| e.iter().copied()).collect();
        DVector::from_vec(values)
    }

    /// Draw one standard normal from the world stream.
    fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Advance every target by one step. The process noise is drawn even when
    /// `Q = 0` so the RNG stream layout does not depend on the noise level.
    pub fn step_targets(&mut self, models: &[TargetModel]) -> Result<()> {
        if models.len() != self.targets.len() {
            return Err(Error::Dimension {
                context: "target models",
                expected: self.targets.len(),
                actual: models.len(),
            });
        }
        let t = self.time_step;
        for (j, model) in models.iter().enumerate() {
            let p = model.dim();
            let z = DVector::from_iterator(p, (0..p).map(|_| self.normal()));
            let e = &self.targets[j];
            let u = model
                .policy
                .input(t, e, &mut self.waypoint_cursor[j], model.b.ncols());
            let next = &model.a * e + &model.b * u + &model.q_sqrt * z;
            self.targets[j] = next;
        }
        self.time_step += 1;
        Ok(())
    }

    /// `y = H e + ν` with `ν ~ N(0, R)`, `R` evaluated at the true robot and
    /// target positions. With `noise == false` no draws happen and `ν = 0`.
    /// Returns an empty vector when the team has no functional sensor.
    pub fn generate_measurements(
        &mut self,
        model: &MeasurementModel,
        lib: &SensorLibrary,
        noise: bool,
    ) -> DVector<f64> {
        let mut y = Vec::with_capacity(model.rows());
        for (i, g) in model.indices.iter().enumerate() {
            if g.is_empty() {
                continue;
            }
            let x = self.robot_positions[i].clone();
            for j in 0..self.targets.len() {
                let e = self.targets[j].clone();
                let info = information_diagonal(&x, &e, g, lib);
                for (k, &l) in g.iter().enumerate() {
                    let clean = lib.row(l).dot(&e.transpose());
                    let nu = if noise {
                        self.normal() / info[k].sqrt()
                    } else {
                        0.0
                    };
                    y.push(clean + nu);
                }
            }
        }
        DVector::from_vec(y)
    }

    /// Detection probability of a robot at `x` given all targets:
    /// `1 - Π_j (1 - φ_j(x))`, evaluated at the true target positions.
    pub fn detection_probability(&self, x: &DVector<f64>, fields: &[RiskField]) -> f64 {
        1.0 - fields
            .iter()
            .zip(&self.targets)
            .map(|(f, e)| 1.0 - f.risk(x, e))
            .product::<f64>()
    }

    /// Flip one detection coin per robot that still has sensors, then pick a
    /// uniformly random functional sensor for every detected robot.
    pub fn simulate_failures(&mut self, gamma: &SensorMatrix, fields: &[RiskField]) -> Vec<FailureEvent> {
        let n = self.robot_positions.len();
        let mut detected = Vec::new();
        for i in 0..n {
            let carried = (0..gamma.types()).filter(|&l| gamma.has(i, l)).count();
            if carried == 0 {
                continue;
            }
            let p = self.detection_probability(&self.robot_positions[i], fields);
            let coin: f64 = self.rng.random();
            if coin < p {
                detected.push(i);
            }
        }
        let mut events = Vec::with_capacity(detected.len());
        for i in detected {
            let carried: Vec<usize> = (0..gamma.types()).filter(|&l| gamma.has(i, l)).collect();
            let k = self.rng.random_range(0..carried.len());
            events.push(FailureEvent {
                robot: i,
                sensor: carried[k],
            });
        }
        events
    }
}
