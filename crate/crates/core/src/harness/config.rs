//! Scenario files: the JSON schema, validation and conversion into the
//! typed objects the simulation runs on.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::controller::{ControllerConfig, ControllerMode};
use crate::error::{Error, Result};
use crate::estimation::Estimate;
use crate::linalg::{is_symmetric, matrix_from_rows, min_eigenvalue};
use crate::observability::{minimal_sensor_matrix, MinimalSensorSet, SogModel};
use crate::sensing::{NoiseParams, SensorLibrary, SensorMatrix};
use crate::world::{ControlPolicy, RiskField, TargetModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Free text shown in summaries.
    #[serde(default)]
    pub description: String,
    pub team: TeamConfig,
    pub targets: Vec<TargetConfig>,
    pub controller: ControllerConfig,
    pub kf: KfConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    /// Output row `h_l`.
    pub h: Vec<f64>,
    /// Information weight `w_l`.
    pub w: f64,
    /// Distance decay `λ_l`.
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeamConfig {
    pub sensors: Vec<SensorConfig>,
    /// Binary robots × sensor-types matrix.
    pub sensor_matrix: Vec<Vec<u8>>,
    pub initial_positions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    pub c: f64,
    pub sigma: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub initial_state: Vec<f64>,
    pub policy: ControlPolicy,
    pub risk: RiskConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KfConfig {
    pub initial_estimates: Vec<Vec<f64>>,
    pub initial_covariances: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    RiskAware,
    NoSog,
    DeltaSweep,
}

impl RunMode {
    pub fn controller_mode(self) -> ControllerMode {
        match self {
            RunMode::NoSog => ControllerMode::NoSog,
            RunMode::RiskAware | RunMode::DeltaSweep => ControllerMode::RiskAware,
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub steps: usize,
    pub seed: u64,
    pub mode: RunMode,
    #[serde(default)]
    pub sweep_deltas: Vec<f64>,
    /// Simulate target-induced sensor failures.
    #[serde(default = "yes")]
    pub failures: bool,
    /// Add measurement noise.
    #[serde(default = "yes")]
    pub measurement_noise: bool,
}

fn default_out() -> String {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out")]
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_out() }
    }
}

/// A validated scenario ready to simulate.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub lib: SensorLibrary,
    pub gamma: SensorMatrix,
    pub robots: Vec<DVector<f64>>,
    pub targets: Vec<TargetModel>,
    pub initial_targets: Vec<DVector<f64>>,
    pub fields: Vec<RiskField>,
    pub initial_estimate: Estimate,
    /// Block-diagonal team process matrix.
    pub a_team: DMatrix<f64>,
    pub q_team: DMatrix<f64>,
    pub sog: SogModel,
    pub minimal: MinimalSensorSet,
}

fn matrix(key: &str, rows: &[Vec<f64>], shape: (usize, usize)) -> Result<DMatrix<f64>> {
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        return Err(Error::config(
            key,
            format!("expected a {}x{} matrix", shape.0, shape.1),
        ));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::config(key, "entries must be finite"));
    }
    Ok(matrix_from_rows(rows))
}

fn vector(key: &str, xs: &[f64], len: usize) -> Result<DVector<f64>> {
    if xs.len() != len {
        return Err(Error::config(key, format!("expected {len} entries, found {}", xs.len())));
    }
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::config(key, "entries must be finite"));
    }
    Ok(DVector::from_column_slice(xs))
}

fn keyed<T>(key: String, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { .. } => e,
        other => Error::config(key, other.to_string()),
    })
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Validate everything and build the typed scenario.
    pub fn build(&self) -> Result<Scenario> {
        let team = &self.team;
        if team.sensors.is_empty() {
            return Err(Error::config("team.sensors", "at least one sensor type is required"));
        }
        let p = team.sensors[0].h.len();
        if p == 0 {
            return Err(Error::config("team.sensors[0].h", "must be non-empty"));
        }
        let mut rows = Vec::with_capacity(team.sensors.len());
        let mut noise = Vec::with_capacity(team.sensors.len());
        for (l, s) in team.sensors.iter().enumerate() {
            rows.push(vector(&format!("team.sensors[{l}].h"), &s.h, p)?.as_slice().to_vec());
            if !(s.w > 0.0 && s.w.is_finite()) {
                return Err(Error::config(format!("team.sensors[{l}].w"), "must be positive"));
            }
            if !(s.lambda >= 0.0 && s.lambda.is_finite()) {
                return Err(Error::config(format!("team.sensors[{l}].lambda"), "must be non-negative"));
            }
            noise.push(NoiseParams {
                weight: s.w,
                decay: s.lambda,
            });
        }
        let lib = keyed("team.sensors".into(), SensorLibrary::new(rows, noise))?;

        let n = team.sensor_matrix.len();
        if n == 0 {
            return Err(Error::config("team.sensor_matrix", "at least one robot is required"));
        }
        for (i, r) in team.sensor_matrix.iter().enumerate() {
            if r.len() != lib.len() {
                return Err(Error::config(
                    format!("team.sensor_matrix[{i}]"),
                    format!("expected {} columns, one per sensor type", lib.len()),
                ));
            }
        }
        let gamma = keyed("team.sensor_matrix".into(), SensorMatrix::from_rows(&team.sensor_matrix))?;
        if team.initial_positions.len() != n {
            return Err(Error::config(
                "team.initial_positions",
                format!("expected {n} positions, one per sensor matrix row"),
            ));
        }
        let robots = team
            .initial_positions
            .iter()
            .enumerate()
            .map(|(i, x)| vector(&format!("team.initial_positions[{i}]"), x, p))
            .collect::<Result<Vec<_>>>()?;

        let m = self.targets.len();
        if m == 0 {
            return Err(Error::config("targets", "at least one target is required"));
        }
        let mut models = Vec::with_capacity(m);
        let mut fields = Vec::with_capacity(m);
        let mut initial_targets = Vec::with_capacity(m);
        for (j, t) in self.targets.iter().enumerate() {
            let key = |k: &str| format!("targets[{j}].{k}");
            let a = matrix(&key("a"), &t.a, (p, p))?;
            let u = t.b.first().map_or(0, |r| r.len());
            let b = matrix(&key("b"), &t.b, (p, u))?;
            let q = matrix(&key("q"), &t.q, (p, p))?;
            models.push(keyed(key("policy"), TargetModel::new(a, b, q, t.policy.clone()))?);
            initial_targets.push(vector(&key("initial_state"), &t.initial_state, p)?);
            let sigma = matrix(&key("risk.sigma"), &t.risk.sigma, (p, p))?;
            fields.push(keyed(key("risk"), RiskField::gaussian(t.risk.c, sigma))?);
        }

        let kf = &self.kf;
        if kf.initial_estimates.len() != m {
            return Err(Error::config("kf.initial_estimates", format!("expected {m} entries, one per target")));
        }
        if kf.initial_covariances.len() != m {
            return Err(Error::config("kf.initial_covariances", format!("expected {m} entries, one per target")));
        }
        let states = kf
            .initial_estimates
            .iter()
            .enumerate()
            .map(|(j, e)| vector(&format!("kf.initial_estimates[{j}]"), e, p))
            .collect::<Result<Vec<_>>>()?;
        let mut covs = Vec::with_capacity(m);
        for (j, c) in kf.initial_covariances.iter().enumerate() {
            let key = format!("kf.initial_covariances[{j}]");
            let c = matrix(&key, c, (p, p))?;
            if !is_symmetric(&c, 1e-12) || min_eigenvalue(&c) < 0.0 {
                return Err(Error::config(key, "must be symmetric positive semidefinite"));
            }
            covs.push(c);
        }
        let initial_estimate = Estimate::from_blocks(&states, &covs)?;

        self.controller.validate(m)?;
        let d_n = self.controller.d_n;
        for a in 0..n {
            for b in a + 1..n {
                if (&robots[a] - &robots[b]).norm() < d_n {
                    return Err(Error::config(
                        "team.initial_positions",
                        format!("robots {a} and {b} start closer than controller.d_n"),
                    ));
                }
            }
        }

        let run = &self.run;
        if run.mode == RunMode::DeltaSweep && run.sweep_deltas.is_empty() {
            return Err(Error::config("run.sweep_deltas", "delta_sweep mode needs at least one value"));
        }
        if run.sweep_deltas.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::config("run.sweep_deltas", "values must be positive"));
        }

        let horizon = self.controller.horizon;
        let dynamics: Vec<DMatrix<f64>> = models.iter().map(|t| t.a.clone()).collect();
        // Every target must be observable on its own; the binding one sets the minimum.
        let mut minimal: Option<MinimalSensorSet> = None;
        for (j, a) in dynamics.iter().enumerate() {
            let found = minimal_sensor_matrix(&lib, a, horizon, n).map_err(|e| {
                Error::config(format!("targets[{j}].a"), format!("no minimal sensor set: {e}"))
            })?;
            if minimal.as_ref().is_none_or(|best| found.total > best.total) {
                minimal = Some(found);
            }
        }
        let minimal = minimal.expect("at least one target");
        let sog = SogModel::new(&dynamics, &lib, horizon)?;
        let a_team = crate::linalg::block_diag(&dynamics);
        let q_team = crate::linalg::block_diag(&models.iter().map(|t| t.q.clone()).collect::<Vec<_>>());

        Ok(Scenario {
            config: self.clone(),
            lib,
            gamma,
            robots,
            targets: models,
            initial_targets,
            fields,
            initial_estimate,
            a_team,
            q_team,
            sog,
            minimal,
        })
    }
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ScenarioConfig::from_file(path)?.build()
    }

    pub fn robots(&self) -> usize {
        self.robots.len()
    }

    pub fn target_count(&self) -> usize {
        self.targets.len()
    }

    pub fn state_dim(&self) -> usize {
        self.lib.dim()
    }
}
