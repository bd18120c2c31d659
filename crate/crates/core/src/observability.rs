//! Observability Gramians, the immunity-weighted (safety-aware) Gramian, the
//! minimal sensor set and the sensing margin.

use nalgebra::{Cholesky, DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::linalg::{block_diag, min_eigenvalue};
use crate::sensing::{SensorLibrary, SensorMatrix};
use crate::world::RiskField;

pub const DEFAULT_HORIZON: usize = 10;
/// Smallest Gramian eigenvalue still counted as observable.
pub const OBSERVABILITY_EPS: f64 = 1e-9;
/// Determinant threshold for the minimal-sensor search.
pub const DETERMINANT_EPS: f64 = 1e-12;
/// Floor on the diagonal of the safety weight matrix.
pub const WEIGHT_FLOOR: f64 = 1e-9;
/// Largest sensor library the exhaustive minimal-set search accepts.
pub const MAX_SEARCH_TYPES: usize = 16;

/// `O = Σ_{k<T} (Aᵀ)ᵏ Hᵀ H Aᵏ`.
pub fn gramian(a: &DMatrix<f64>, h: &DMatrix<f64>, horizon: usize) -> Result<DMatrix<f64>> {
    weighted_gramian(a, h, None, horizon)
}

fn weighted_gramian(
    a: &DMatrix<f64>,
    h: &DMatrix<f64>,
    weights: Option<&DVector<f64>>,
    horizon: usize,
) -> Result<DMatrix<f64>> {
    if horizon == 0 {
        return Err(Error::Argument("Gramian horizon must be at least 1".into()));
    }
    let n = a.nrows();
    if !a.is_square() || h.ncols() != n {
        return Err(Error::Dimension {
            context: "Gramian state dimension",
            expected: n,
            actual: h.ncols(),
        });
    }
    let htwh = match weights {
        Some(w) => h.transpose() * DMatrix::from_diagonal(w) * h,
        None => h.transpose() * h,
    };
    let mut out = DMatrix::zeros(n, n);
    let mut ak = DMatrix::identity(n, n);
    for _ in 0..horizon {
        out += ak.transpose() * &htwh * &ak;
        ak = a * ak;
    }
    crate::linalg::symmetrize(&mut out);
    Ok(out)
}

/// Diagonal of `Π = ⊕_i ⊕_j I_{|γ_i|} ⊗ π_j(x_i)`, in team measurement row order.
pub fn safety_weights(
    gamma: &SensorMatrix,
    robots: &[DVector<f64>],
    target_estimates: &[DVector<f64>],
    fields: &[RiskField],
) -> Result<DVector<f64>> {
    if robots.len() != gamma.robots() {
        return Err(Error::Dimension {
            context: "robot positions vs sensor matrix rows",
            expected: gamma.robots(),
            actual: robots.len(),
        });
    }
    if fields.len() != target_estimates.len() {
        return Err(Error::Dimension {
            context: "risk fields vs targets",
            expected: target_estimates.len(),
            actual: fields.len(),
        });
    }
    let mut w = Vec::new();
    for (i, x) in robots.iter().enumerate() {
        let count = gamma.sensor_indices(i)?.len();
        for (f, e) in fields.iter().zip(target_estimates) {
            let pi = f.immunity(x, e).max(WEIGHT_FLOOR);
            w.extend(std::iter::repeat_n(pi, count));
        }
    }
    Ok(DVector::from_vec(w))
}

/// `Π` as a dense diagonal matrix.
pub fn safety_weight_matrix(
    gamma: &SensorMatrix,
    robots: &[DVector<f64>],
    target_estimates: &[DVector<f64>],
    fields: &[RiskField],
) -> Result<DMatrix<f64>> {
    Ok(DMatrix::from_diagonal(&safety_weights(gamma, robots, target_estimates, fields)?))
}

/// Inputs of the safety-aware Gramian `O_Π`.
#[derive(Debug, Clone)]
pub struct SogContext {
    pub a: DMatrix<f64>,
    pub h: DMatrix<f64>,
    /// Diagonal of `Π`.
    pub weights: DVector<f64>,
    pub horizon: usize,
}

impl SogContext {
    pub fn new(a: DMatrix<f64>, h: DMatrix<f64>, weights: DVector<f64>, horizon: usize) -> Result<Self> {
        if weights.len() != h.nrows() {
            return Err(Error::Dimension {
                context: "safety weights vs measurement rows",
                expected: h.nrows(),
                actual: weights.len(),
            });
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Argument("safety weights must be strictly positive".into()));
        }
        if horizon == 0 {
            return Err(Error::Argument("Gramian horizon must be at least 1".into()));
        }
        Ok(Self {
            a,
            h,
            weights,
            horizon,
        })
    }

    /// `O_Π = Σ_{k<T} (Aᵀ)ᵏ Hᵀ Π H Aᵏ`.
    pub fn sog(&self) -> Result<DMatrix<f64>> {
        weighted_gramian(&self.a, &self.h, Some(&self.weights), self.horizon)
    }
}

/// `trace(O⁻¹)` with a degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceInverse {
    /// `trace(O⁻¹)`, or `trace((O + εI)⁻¹)` when observability is lost.
    pub value: f64,
    pub min_eigenvalue: f64,
    pub observability_lost: bool,
}

pub fn trace_inv_sog(o: &DMatrix<f64>) -> TraceInverse {
    let min_eig = min_eigenvalue(o);
    let lost = !(min_eig >= OBSERVABILITY_EPS);
    let value = trace_inverse(o, lost);
    TraceInverse {
        value,
        min_eigenvalue: min_eig,
        observability_lost: lost,
    }
}

fn trace_inverse(o: &DMatrix<f64>, regularize: bool) -> f64 {
    let n = o.nrows();
    let m = if regularize {
        o + DMatrix::identity(n, n) * OBSERVABILITY_EPS
    } else {
        o.clone()
    };
    match Cholesky::new(m) {
        Some(c) => c.inverse().trace(),
        None => f64::INFINITY,
    }
}

/// Per-target, per-sensor-type Gramian pieces for fast evaluation of `O_Π`
/// as a function of robot positions.
///
/// With block-diagonal dynamics and `H_i = I_M ⊗ H_ij`, `O_Π` is block
/// diagonal with `O_j = Σ_i π_j(x_i) Σ_{l∈γ_i} G_jl`, where
/// `G_jl = Σ_k (A_jᵀ)ᵏ h_lᵀ h_l A_jᵏ`.
#[derive(Debug, Clone)]
pub struct SogModel {
    pieces: Vec<Vec<DMatrix<f64>>>,
    horizon: usize,
}

/// Value and optional gradient of `trace(O_Π⁻¹)`.
#[derive(Debug, Clone)]
pub struct SogEvaluation {
    pub trace_inverse: TraceInverse,
    /// `trace(O_Π)`.
    pub trace: f64,
    pub gradient: Option<Vec<DVector<f64>>>,
}

impl SogModel {
    pub fn new(target_dynamics: &[DMatrix<f64>], lib: &SensorLibrary, horizon: usize) -> Result<Self> {
        let pieces = target_dynamics
            .iter()
            .map(|a| {
                (0..lib.len())
                    .map(|l| gramian(a, &DMatrix::from_rows(&[lib.row(l).clone()]), horizon))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { pieces, horizon })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    fn blocks(
        &self,
        indices: &[Vec<usize>],
        weights: &[Vec<f64>],
    ) -> Vec<DMatrix<f64>> {
        self.pieces
            .iter()
            .enumerate()
            .map(|(j, per_type)| {
                let p = per_type[0].nrows();
                let mut o = DMatrix::zeros(p, p);
                for (i, g) in indices.iter().enumerate() {
                    for &l in g {
                        o += &per_type[l] * weights[i][j];
                    }
                }
                o
            })
            .collect()
    }

    /// The full block-diagonal `O_Π`.
    pub fn matrix(
        &self,
        indices: &[Vec<usize>],
        robots: &[DVector<f64>],
        target_estimates: &[DVector<f64>],
        fields: &[RiskField],
    ) -> DMatrix<f64> {
        let weights = immunities(robots, target_estimates, fields);
        block_diag(&self.blocks(indices, &weights))
    }

    pub fn evaluate(
        &self,
        indices: &[Vec<usize>],
        robots: &[DVector<f64>],
        target_estimates: &[DVector<f64>],
        fields: &[RiskField],
        want_gradient: bool,
    ) -> SogEvaluation {
        self.evaluate_with(indices, robots, target_estimates, fields, want_gradient, false)
    }

    /// As [`SogModel::evaluate`]; `force_regularized` applies the `εI` shift
    /// even where the Gramian is well conditioned.
    pub fn evaluate_with(
        &self,
        indices: &[Vec<usize>],
        robots: &[DVector<f64>],
        target_estimates: &[DVector<f64>],
        fields: &[RiskField],
        want_gradient: bool,
        force_regularized: bool,
    ) -> SogEvaluation {
        let weights = immunities(robots, target_estimates, fields);
        let blocks = self.blocks(indices, &weights);
        let min_eig = blocks
            .iter()
            .map(min_eigenvalue)
            .fold(f64::INFINITY, f64::min);
        let lost = !(min_eig >= OBSERVABILITY_EPS);
        let regularize = lost || force_regularized;
        let inverses: Vec<Option<DMatrix<f64>>> = blocks
            .iter()
            .map(|o| {
                let n = o.nrows();
                let m = if regularize {
                    o + DMatrix::identity(n, n) * OBSERVABILITY_EPS
                } else {
                    o.clone()
                };
                Cholesky::new(m).map(|c| c.inverse())
            })
            .collect();
        let value = inverses
            .iter()
            .map(|inv| inv.as_ref().map_or(f64::INFINITY, |m| m.trace()))
            .sum();
        let trace = blocks.iter().map(|o| o.trace()).sum();

        let gradient = want_gradient.then(|| {
            let dim = robots.first().map_or(0, |x| x.len());
            let mut grad = vec![DVector::zeros(dim); robots.len()];
            for (j, inv) in inverses.iter().enumerate() {
                let Some(inv) = inv else { continue };
                let inv_sq = inv * inv;
                for (i, g) in indices.iter().enumerate() {
                    if g.is_empty() || weights[i][j] <= WEIGHT_FLOOR {
                        continue;
                    }
                    // d tr(O⁻¹) = -tr(O⁻¹ dO O⁻¹) = -tr(O⁻² dO)
                    let sens: f64 = g
                        .iter()
                        .map(|&l| inv_sq.component_mul(&self.pieces[j][l]).sum())
                        .sum();
                    let dpi = fields[j].immunity_gradient(&robots[i], &target_estimates[j]);
                    grad[i] -= dpi * sens;
                }
            }
            grad
        });

        SogEvaluation {
            trace_inverse: TraceInverse {
                value,
                min_eigenvalue: min_eig,
                observability_lost: lost,
            },
            trace,
            gradient,
        }
    }
}

/// `π_j(x_i)` floored at [`WEIGHT_FLOOR`], indexed `[robot][target]`.
fn immunities(robots: &[DVector<f64>], targets: &[DVector<f64>], fields: &[RiskField]) -> Vec<Vec<f64>> {
    robots
        .iter()
        .map(|x| {
            fields
                .iter()
                .zip(targets)
                .map(|(f, e)| f.immunity(x, e).max(WEIGHT_FLOOR))
                .collect()
        })
        .collect()
}

/// Smallest multiset of sensor types that makes a single target observable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinimalSensorSet {
    /// Number of sensors of each type.
    pub counts: Vec<usize>,
    pub total: usize,
}

impl MinimalSensorSet {
    /// `‖Γ_min‖_F = √total`.
    pub fn frobenius_norm(&self) -> f64 {
        (self.total as f64).sqrt()
    }
}

/// Exhaustive search over per-type sensor counts (each at most
/// `max_per_type`) for the fewest sensors whose stacked rows make the
/// single-target Gramian nonsingular.
///
/// Fails when no combination is observable. Because every target sees the
/// same per-robot rows, the team problem reduces to one target block, and
/// which robot hosts a sensor does not matter.
pub fn minimal_sensor_matrix(
    lib: &SensorLibrary,
    a_single: &DMatrix<f64>,
    horizon: usize,
    max_per_type: usize,
) -> Result<MinimalSensorSet> {
    let u = lib.len();
    if u > MAX_SEARCH_TYPES {
        return Err(Error::Argument(format!(
            "sensor library of {u} types exceeds the exhaustive search bound {MAX_SEARCH_TYPES}"
        )));
    }
    if a_single.shape() != (lib.dim(), lib.dim()) {
        return Err(Error::Dimension {
            context: "single-target process matrix",
            expected: lib.dim(),
            actual: a_single.nrows(),
        });
    }
    let observable = |counts: &[usize]| -> Result<bool> {
        let rows: Vec<RowDVector<f64>> = counts
            .iter()
            .enumerate()
            .flat_map(|(l, &c)| std::iter::repeat_n(lib.row(l).clone(), c))
            .collect();
        let h = DMatrix::from_rows(&rows);
        Ok(gramian(a_single, &h, horizon)?.determinant() > DETERMINANT_EPS)
    };
    for total in 1..=u * max_per_type {
        let mut found = None;
        let mut counts = vec![0; u];
        compositions(total, max_per_type, 0, &mut counts, &mut |c| {
            if found.is_none() && observable(c).unwrap_or(false) {
                found = Some(c.to_vec());
            }
        });
        if let Some(counts) = found {
            return Ok(MinimalSensorSet { counts, total });
        }
    }
    Err(Error::Argument(
        "no combination of library sensors makes the targets observable".into(),
    ))
}

/// Visit every vector `counts` with `Σ counts = remaining` and entries `≤ cap`.
fn compositions(remaining: usize, cap: usize, pos: usize, counts: &mut Vec<usize>, visit: &mut dyn FnMut(&[usize])) {
    if pos + 1 == counts.len() {
        if remaining <= cap {
            counts[pos] = remaining;
            visit(counts);
            counts[pos] = 0;
        }
        return;
    }
    for c in (0..=remaining.min(cap)).rev() {
        counts[pos] = c;
        compositions(remaining - c, cap, pos + 1, counts, visit);
    }
    counts[pos] = 0;
}

/// `Δ = ‖Γ‖_F - ‖Γ_min‖_F`; negative once the team is below the minimum.
pub fn sensing_margin(gamma: &SensorMatrix, minimal_norm: f64) -> f64 {
    gamma.frobenius_norm() - minimal_norm
}
