//! Heterogeneous sensor model.
//!
//! Every sensor type is a single linear output row `h_l` plus a noise profile.
//! A robot's measurement block is the stack of the rows it still carries, and
//! its noise information decays exponentially with distance to the target.
//!
//! All indices are zero-based. Team rows are ordered robot-major, then
//! target, then the robot's sensor order.

use nalgebra::{DMatrix, DVector, RowDVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::block_diag;

/// Noise profile of one sensor type: `R⁻¹ = weight · exp(-decay · distance)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub weight: f64,
    pub decay: f64,
}

impl NoiseParams {
    /// Inverse variance at the given robot-target distance.
    pub fn information(&self, distance: f64) -> f64 {
        self.weight * (-self.decay * distance).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorLibrary {
    rows: Vec<RowDVector<f64>>,
    noise: Vec<NoiseParams>,
}

impl SensorLibrary {
    pub fn new(rows: Vec<Vec<f64>>, noise: Vec<NoiseParams>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Argument("sensor library must hold at least one sensor".into()));
        }
        if rows.len() != noise.len() {
            return Err(Error::Dimension {
                context: "sensor library noise parameters",
                expected: rows.len(),
                actual: noise.len(),
            });
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::Argument("sensor rows must be non-empty".into()));
        }
        for row in &rows {
            if row.len() != dim {
                return Err(Error::Dimension {
                    context: "sensor row",
                    expected: dim,
                    actual: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Argument("sensor rows must be finite".into()));
            }
        }
        for (l, n) in noise.iter().enumerate() {
            if !(n.weight > 0.0 && n.weight.is_finite()) {
                return Err(Error::Argument(format!("sensor {l}: weight must be positive")));
            }
            if !(n.decay >= 0.0 && n.decay.is_finite()) {
                return Err(Error::Argument(format!("sensor {l}: decay must be non-negative")));
            }
        }
        Ok(Self {
            rows: rows.into_iter().map(|r| RowDVector::from_vec(r)).collect(),
            noise,
        })
    }

    /// Number of sensor types.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Dimension of the target state each sensor observes.
    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn row(&self, l: usize) -> &RowDVector<f64> {
        &self.rows[l]
    }

    pub fn noise(&self, l: usize) -> NoiseParams {
        self.noise[l]
    }

    /// Stack the rows named by `indices`, in order.
    pub fn stack(&self, indices: &[usize]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(indices.len(), self.dim());
        for (r, &l) in indices.iter().enumerate() {
            out.row_mut(r).copy_from(&self.rows[l]);
        }
        out
    }

    /// Library with its sensor types reordered by `perm` (`new[k] = old[perm[k]]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            rows: perm.iter().map(|&l| self.rows[l].clone()).collect(),
            noise: perm.iter().map(|&l| self.noise[l]).collect(),
        }
    }
}

/// Binary robot-by-sensor-type ownership matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SensorMatrix {
    robots: usize,
    types: usize,
    entries: Vec<bool>,
}

impl SensorMatrix {
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let robots = rows.len();
        let types = rows.first().map_or(0, |r| r.len());
        let mut entries = Vec::with_capacity(robots * types);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != types {
                return Err(Error::Dimension {
                    context: "sensor matrix row",
                    expected: types,
                    actual: row.len(),
                });
            }
            for (l, &v) in row.iter().enumerate() {
                match v {
                    0 => entries.push(false),
                    1 => entries.push(true),
                    _ => {
                        return Err(Error::Argument(format!(
                            "sensor matrix entry ({i}, {l}) is {v}, expected 0 or 1"
                        )))
                    }
                }
            }
        }
        Ok(Self {
            robots,
            types,
            entries,
        })
    }

    /// Every robot carries every sensor type.
    pub fn full(robots: usize, types: usize) -> Self {
        Self {
            robots,
            types,
            entries: vec![true; robots * types],
        }
    }

    pub fn robots(&self) -> usize {
        self.robots
    }

    pub fn types(&self) -> usize {
        self.types
    }

    pub fn has(&self, robot: usize, sensor: usize) -> bool {
        self.entries[robot * self.types + sensor]
    }

    fn set(&mut self, robot: usize, sensor: usize, value: bool) {
        self.entries[robot * self.types + sensor] = value;
    }

    /// Ordered sensor types still carried by `robot`.
    pub fn sensor_indices(&self, robot: usize) -> Result<Vec<usize>> {
        if robot >= self.robots {
            return Err(Error::Argument(format!(
                "robot index {robot} out of range for {} robots",
                self.robots
            )));
        }
        Ok((0..self.types).filter(|&l| self.has(robot, l)).collect())
    }

    /// `γ_i` for every robot.
    pub fn all_indices(&self) -> Vec<Vec<usize>> {
        (0..self.robots)
            .map(|i| (0..self.types).filter(|&l| self.has(i, l)).collect())
            .collect()
    }

    /// Total number of functional sensors, `‖Γ‖²_F`.
    pub fn sensor_count(&self) -> usize {
        self.entries.iter().filter(|&&e| e).count()
    }

    pub fn frobenius_norm(&self) -> f64 {
        (self.sensor_count() as f64).sqrt()
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        (0..self.robots)
            .map(|i| (0..self.types).map(|l| self.has(i, l) as u8).collect())
            .collect()
    }

    /// Compact textual form, rows separated by `|`, e.g. `111|101`.
    pub fn to_compact(&self) -> String {
        self.to_rows()
            .iter()
            .map(|r| r.iter().map(|v| char::from(b'0' + v)).collect::<String>())
            .collect::<Vec<_>>()
            .join("|")
    }
}

/// One sensor of one robot going dark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FailureEvent {
    pub robot: usize,
    pub sensor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureOutcome {
    pub matrix: SensorMatrix,
    /// Events that switched a sensor off.
    pub applied: Vec<FailureEvent>,
    /// Events naming a sensor that was already off (or out of range).
    pub ignored: Vec<FailureEvent>,
}

impl FailureOutcome {
    pub fn has_warnings(&self) -> bool {
        !self.ignored.is_empty()
    }
}

/// Switch off the sensors named by `events`. Repeated or stale events are
/// reported in `ignored` and otherwise have no effect.
pub fn apply_failures(gamma: &SensorMatrix, events: &[FailureEvent]) -> FailureOutcome {
    let mut matrix = gamma.clone();
    let mut applied = Vec::new();
    let mut ignored = Vec::new();
    for &ev in events {
        if ev.robot < matrix.robots && ev.sensor < matrix.types && matrix.has(ev.robot, ev.sensor) {
            matrix.set(ev.robot, ev.sensor, false);
            applied.push(ev);
        } else {
            ignored.push(ev);
        }
    }
    FailureOutcome {
        matrix,
        applied,
        ignored,
    }
}

/// Per-robot measurement blocks and the stacked team matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    pub indices: Vec<Vec<usize>>,
    /// `H_ij`, shape `|γ_i| × p`, identical for every target.
    pub per_robot: Vec<DMatrix<f64>>,
    /// Stacked `H = [I_M ⊗ H_1j; …; I_M ⊗ H_Nj]`.
    pub team: DMatrix<f64>,
    pub targets: usize,
}

impl MeasurementModel {
    pub fn rows(&self) -> usize {
        self.team.nrows()
    }

    pub fn has_measurements(&self) -> bool {
        self.team.nrows() > 0
    }
}

pub fn build_measurement_model(
    gamma: &SensorMatrix,
    lib: &SensorLibrary,
    targets: usize,
) -> Result<MeasurementModel> {
    if gamma.types() != lib.len() {
        return Err(Error::Dimension {
            context: "sensor matrix columns vs library size",
            expected: lib.len(),
            actual: gamma.types(),
        });
    }
    let p = lib.dim();
    let indices = gamma.all_indices();
    let per_robot: Vec<DMatrix<f64>> = indices.iter().map(|g| lib.stack(g)).collect();
    let rows: usize = per_robot.iter().map(|h| h.nrows() * targets).sum();
    let mut team = DMatrix::zeros(rows, targets * p);
    let mut r = 0;
    for h in &per_robot {
        for j in 0..targets {
            team.view_mut((r, j * p), (h.nrows(), p)).copy_from(h);
            r += h.nrows();
        }
    }
    Ok(MeasurementModel {
        indices,
        per_robot,
        team,
        targets,
    })
}

/// Diagonal of `R_ij⁻¹` for one robot-target pair.
pub fn information_diagonal(
    robot_pos: &DVector<f64>,
    target_pos: &DVector<f64>,
    indices: &[usize],
    lib: &SensorLibrary,
) -> Vec<f64> {
    let d = (robot_pos - target_pos).norm();
    indices.iter().map(|&l| lib.noise(l).information(d)).collect()
}

/// `R_ij`, diagonal with entries `1 / (w_l exp(-λ_l ‖x_i - e_j‖))`.
pub fn noise_covariance(
    robot_pos: &DVector<f64>,
    target_pos: &DVector<f64>,
    indices: &[usize],
    lib: &SensorLibrary,
) -> DMatrix<f64> {
    let info = information_diagonal(robot_pos, target_pos, indices, lib);
    DMatrix::from_diagonal(&DVector::from_iterator(info.len(), info.iter().map(|v| 1.0 / v)))
}

/// Team noise covariance `R = R_11 ⊕ R_12 ⊕ … ⊕ R_NM`, matching the row
/// order of the team measurement matrix.
pub fn team_noise_covariance(
    robots: &[DVector<f64>],
    targets: &[DVector<f64>],
    gamma: &SensorMatrix,
    lib: &SensorLibrary,
) -> Result<DMatrix<f64>> {
    if robots.len() != gamma.robots() {
        return Err(Error::Dimension {
            context: "robot positions vs sensor matrix rows",
            expected: gamma.robots(),
            actual: robots.len(),
        });
    }
    let p = lib.dim();
    for x in robots.iter().chain(targets) {
        if x.len() != p {
            return Err(Error::Dimension {
                context: "position dimension",
                expected: p,
                actual: x.len(),
            });
        }
    }
    let mut blocks = Vec::with_capacity(robots.len() * targets.len());
    for (i, x) in robots.iter().enumerate() {
        let g = gamma.sensor_indices(i)?;
        if g.is_empty() {
            continue;
        }
        for e in targets {
            blocks.push(noise_covariance(x, e, &g, lib));
        }
    }
    Ok(block_diag(&blocks))
}
