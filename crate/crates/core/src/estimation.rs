//! Multi-target Kalman filter with block-diagonal covariance.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{clip_psd, symmetrize};
use crate::sensing::{build_measurement_model, team_noise_covariance, SensorLibrary, SensorMatrix};

/// Jitter added to a numerically singular innovation matrix.
pub const INNOVATION_JITTER: f64 = 1e-9;
/// Eigenvalues below this trigger PSD clipping of a covariance block.
pub const PSD_TOLERANCE: f64 = -1e-10;

/// Stacked target estimate `ê` with covariance `P = P_1 ⊕ … ⊕ P_M`.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub state: DVector<f64>,
    pub covariance: DMatrix<f64>,
    block: usize,
}

impl Estimate {
    /// `block` is the per-target state dimension; use `state.len()` for a
    /// single unstructured state.
    pub fn new(state: DVector<f64>, covariance: DMatrix<f64>, block: usize) -> Result<Self> {
        let n = state.len();
        if covariance.shape() != (n, n) {
            return Err(Error::Dimension {
                context: "estimate covariance side",
                expected: n,
                actual: covariance.nrows(),
            });
        }
        if block == 0 || n % block != 0 {
            return Err(Error::Argument(format!(
                "state length {n} is not a multiple of block size {block}"
            )));
        }
        Ok(Self {
            state,
            covariance,
            block,
        })
    }

    pub fn from_blocks(states: &[DVector<f64>], covariances: &[DMatrix<f64>]) -> Result<Self> {
        let p = states.first().map_or(0, |s| s.len());
        if states.len() != covariances.len() {
            return Err(Error::Dimension {
                context: "per-target covariance blocks",
                expected: states.len(),
                actual: covariances.len(),
            });
        }
        let stacked: Vec<f64> = states.iter().flat_map(|s| s.iter().copied()).collect();
        let cov = crate::linalg::block_diag(covariances);
        Self::new(DVector::from_vec(stacked), cov, p)
    }

    pub fn block_dim(&self) -> usize {
        self.block
    }

    pub fn targets(&self) -> usize {
        self.state.len() / self.block
    }

    pub fn target_state(&self, j: usize) -> DVector<f64> {
        self.state.rows(j * self.block, self.block).into_owned()
    }

    pub fn target_covariance(&self, j: usize) -> DMatrix<f64> {
        let p = self.block;
        self.covariance.view((j * p, j * p), (p, p)).into_owned()
    }

    pub fn target_states(&self) -> Vec<DVector<f64>> {
        (0..self.targets()).map(|j| self.target_state(j)).collect()
    }

    /// `trace(P_j)`.
    pub fn per_target_trace(&self, j: usize) -> Result<f64> {
        if j >= self.targets() {
            return Err(Error::Argument(format!(
                "target index {j} out of range for {} targets",
                self.targets()
            )));
        }
        Ok(self.target_covariance(j).trace())
    }

    pub fn total_trace(&self) -> f64 {
        self.covariance.trace()
    }

    fn enforce_structure(&mut self) {
        symmetrize(&mut self.covariance);
        let p = self.block;
        let m = self.targets();
        for a in 0..m {
            for b in 0..m {
                if a != b {
                    self.covariance.view_mut((a * p, b * p), (p, p)).fill(0.0);
                }
            }
            let blk = self.target_covariance(a);
            if crate::linalg::min_eigenvalue(&blk) < PSD_TOLERANCE {
                self.covariance
                    .view_mut((a * p, a * p), (p, p))
                    .copy_from(&clip_psd(&blk));
            }
        }
    }
}

/// `ê_- = A ê`, `P_- = A P Aᵀ + Q`. The target control term is not modelled.
pub fn predict(est: &Estimate, a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<Estimate> {
    let n = est.state.len();
    if a.shape() != (n, n) || q.shape() != (n, n) {
        return Err(Error::Dimension {
            context: "prediction matrices",
            expected: n,
            actual: a.nrows(),
        });
    }
    let mut cov = a * &est.covariance * a.transpose() + q;
    symmetrize(&mut cov);
    Ok(Estimate {
        state: a * &est.state,
        covariance: cov,
        block: est.block,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub estimate: Estimate,
    /// The innovation matrix had to be regularized.
    pub regularized: bool,
}

/// Kalman gain `K = P Hᵀ S⁻¹` with `S = H P Hᵀ + R`; falls back to `S + εI`
/// when `S` is not numerically positive definite.
fn gain(prior_cov: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let hp = h * prior_cov;
    let s = &hp * h.transpose() + r;
    let (chol, regularized) = match Cholesky::new(s.clone()) {
        Some(c) => (c, false),
        None => {
            let k = s.nrows();
            let jittered = s + DMatrix::identity(k, k) * INNOVATION_JITTER;
            match Cholesky::new(jittered) {
                Some(c) => (c, true),
                None => return (DMatrix::zeros(prior_cov.nrows(), h.nrows()), true),
            }
        }
    };
    (chol.solve(&hp).transpose(), regularized)
}

/// Measurement update with the standard gain form `P = (I - K H) P_-`.
pub fn update(prior: &Estimate, y: &DVector<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<UpdateOutcome> {
    let n = prior.state.len();
    if h.ncols() != n {
        return Err(Error::Dimension {
            context: "measurement matrix columns",
            expected: n,
            actual: h.ncols(),
        });
    }
    if y.len() != h.nrows() || r.shape() != (h.nrows(), h.nrows()) {
        return Err(Error::Dimension {
            context: "measurement rows",
            expected: h.nrows(),
            actual: y.len(),
        });
    }
    if h.nrows() == 0 {
        return Ok(UpdateOutcome {
            estimate: prior.clone(),
            regularized: false,
        });
    }
    let (k, regularized) = gain(&prior.covariance, h, r);
    let innovation = y - h * &prior.state;
    let state = &prior.state + &k * innovation;
    let covariance = (DMatrix::identity(n, n) - &k * h) * &prior.covariance;
    let mut estimate = Estimate {
        state,
        covariance,
        block: prior.block,
    };
    estimate.enforce_structure();
    Ok(UpdateOutcome {
        estimate,
        regularized,
    })
}

/// Posterior covariance the filter would produce if the robots stood at
/// `robots`, with the noise evaluated against the prior target estimate.
pub fn predicted_posterior_cov(
    robots: &[DVector<f64>],
    prior: &Estimate,
    gamma: &SensorMatrix,
    lib: &SensorLibrary,
) -> Result<DMatrix<f64>> {
    let mm = build_measurement_model(gamma, lib, prior.targets())?;
    if !mm.has_measurements() {
        return Ok(prior.covariance.clone());
    }
    let r = team_noise_covariance(robots, &prior.target_states(), gamma, lib)?;
    let (k, _) = gain(&prior.covariance, &mm.team, &r);
    let n = prior.state.len();
    let mut p = (DMatrix::identity(n, n) - &k * &mm.team) * &prior.covariance;
    symmetrize(&mut p);
    Ok(p)
}

/// Measurement rows a team takes of a single target.
#[derive(Debug, Clone)]
pub struct TargetRows {
    /// One row per (robot, sensor), robot-major.
    pub h: DMatrix<f64>,
    /// Owning robot of each row.
    pub robot: Vec<usize>,
    /// Sensor type of each row.
    pub sensor: Vec<usize>,
}

impl TargetRows {
    pub fn new(indices: &[Vec<usize>], lib: &SensorLibrary) -> Self {
        let (robot, sensor): (Vec<usize>, Vec<usize>) = indices
            .iter()
            .enumerate()
            .flat_map(|(i, g)| g.iter().map(move |&l| (i, l)))
            .unzip();
        Self {
            h: lib.stack(&sensor),
            robot,
            sensor,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.robot.is_empty()
    }
}

/// Single-target posterior covariance for candidate robot positions, and
/// optionally the gradient of its trace with respect to each robot position.
///
/// Equivalent to the `j`-th diagonal block of [`predicted_posterior_cov`],
/// since cross-target blocks of `H`, `R` and `P_-` are all zero.
pub fn target_posterior(
    robots: &[DVector<f64>],
    target_estimate: &DVector<f64>,
    prior_cov: &DMatrix<f64>,
    rows: &TargetRows,
    lib: &SensorLibrary,
    want_gradient: bool,
) -> (DMatrix<f64>, Option<Vec<DVector<f64>>>) {
    if rows.is_empty() {
        let grad = want_gradient.then(|| vec![DVector::zeros(target_estimate.len()); robots.len()]);
        return (prior_cov.clone(), grad);
    }
    let k_rows = rows.robot.len();
    let mut info = Vec::with_capacity(k_rows);
    let mut dists = Vec::with_capacity(k_rows);
    for (&i, &l) in rows.robot.iter().zip(&rows.sensor) {
        let d = (&robots[i] - target_estimate).norm();
        dists.push(d);
        info.push(lib.noise(l).information(d));
    }
    let r = DMatrix::from_diagonal(&DVector::from_iterator(k_rows, info.iter().map(|v| 1.0 / v)));
    let (k, _) = gain(prior_cov, &rows.h, &r);
    let p = prior_cov.nrows();
    let mut post = (DMatrix::identity(p, p) - &k * &rows.h) * prior_cov;
    symmetrize(&mut post);

    let grad = want_gradient.then(|| {
        let mut g = vec![DVector::zeros(target_estimate.len()); robots.len()];
        for c in 0..k_rows {
            let d = dists[c];
            if d == 0.0 {
                continue;
            }
            let i = rows.robot[c];
            let decay = lib.noise(rows.sensor[c]).decay;
            // d tr(P) / d r_c = -‖K e_c‖² / r_c², and d r_c / d x_i = -λ r_c (x_i - ê)/d
            let scale = k.column(c).norm_squared() * decay / info[c] / d;
            g[i] += (&robots[i] - target_estimate) * scale;
        }
        g
    });
    (post, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::NoiseParams;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn scalar(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn predict_examples() {
        let est = Estimate::new(v(&[1.0, 2.0]), DMatrix::identity(2, 2) * 0.3, 2).unwrap();
        let same = predict(&est, &DMatrix::identity(2, 2), &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(same, est);

        let s = Estimate::new(v(&[0.0]), scalar(1.0), 1).unwrap();
        let out = predict(&s, &scalar(1.0), &scalar(1.0)).unwrap();
        assert_eq!(out.covariance[(0, 0)], 2.0);

        let p0 = DMatrix::from_diagonal(&v(&[0.2, 0.3, 0.4, 0.5]));
        let est = Estimate::new(v(&[0.0; 4]), p0.clone(), 2).unwrap();
        let out = predict(&est, &DMatrix::identity(4, 4), &(DMatrix::identity(4, 4) * 0.01)).unwrap();
        assert!((out.covariance - (p0 + DMatrix::identity(4, 4) * 0.01)).norm() < 1e-15);
    }

    #[test]
    fn scalar_update() {
        let prior = Estimate::new(v(&[3.0]), scalar(2.0), 1).unwrap();
        let out = update(&prior, &v(&[3.0]), &scalar(1.0), &scalar(2.0)).unwrap();
        assert!((out.estimate.covariance[(0, 0)] - 1.0).abs() < 1e-15);
        assert_eq!(out.estimate.state[0], 3.0);
        assert!(!out.regularized);

        // K = 0.5: ê = 3 + 0.5 (5 - 3)
        let out = update(&prior, &v(&[5.0]), &scalar(1.0), &scalar(2.0)).unwrap();
        assert!((out.estimate.state[0] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn uninformative_measurement_changes_little() {
        let prior = Estimate::new(v(&[1.0, -1.0]), DMatrix::identity(2, 2), 2).unwrap();
        let h = DMatrix::identity(2, 2);
        let r = DMatrix::identity(2, 2) * 1e12;
        let out = update(&prior, &v(&[100.0, 100.0]), &h, &r).unwrap();
        assert!((&out.estimate.covariance - &prior.covariance).norm() < 1e-10);
        assert!((&out.estimate.state - &prior.state).norm() < 1e-9);
    }

    #[test]
    fn singular_innovation_is_regularized() {
        let prior = Estimate::new(v(&[0.0, 0.0]), DMatrix::zeros(2, 2), 2).unwrap();
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let out = update(&prior, &v(&[1.0]), &h, &DMatrix::zeros(1, 1)).unwrap();
        assert!(out.regularized);
        assert!(out.estimate.state.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn empty_measurement_keeps_prior() {
        let prior = Estimate::new(v(&[1.0, 2.0]), DMatrix::identity(2, 2), 2).unwrap();
        let out = update(&prior, &v(&[]), &DMatrix::zeros(0, 2), &DMatrix::zeros(0, 0)).unwrap();
        assert_eq!(out.estimate, prior);
    }

    #[test]
    fn per_target_trace_examples() {
        let est = Estimate::new(v(&[0.0; 4]), DMatrix::identity(4, 4), 2).unwrap();
        assert_eq!(est.per_target_trace(0).unwrap(), 2.0);
        let est = Estimate::new(v(&[0.0; 4]), DMatrix::from_diagonal(&v(&[0.1, 0.2, 0.3, 0.4])), 2).unwrap();
        assert!((est.per_target_trace(1).unwrap() - 0.7).abs() < 1e-15);
        let sum: f64 = (0..2).map(|j| est.per_target_trace(j).unwrap()).sum();
        assert!((sum - est.total_trace()).abs() < 1e-15);
        assert!(est.per_target_trace(2).is_err());
    }

    fn lib() -> SensorLibrary {
        let n = NoiseParams { weight: 1.8, decay: 0.1 };
        SensorLibrary::new(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]], vec![n; 3]).unwrap()
    }

    fn scalar_lib() -> SensorLibrary {
        SensorLibrary::new(vec![vec![1.0]], vec![NoiseParams { weight: 1.8, decay: 0.1 }]).unwrap()
    }

    #[test]
    fn far_robots_gain_nothing() {
        let prior = Estimate::new(v(&[0.0, 0.0]), DMatrix::identity(2, 2), 2).unwrap();
        let g = SensorMatrix::full(1, 3);
        let p = predicted_posterior_cov(&[v(&[1e4, 0.0])], &prior, &g, &lib()).unwrap();
        assert!((p - &prior.covariance).norm() < 1e-12);
    }

    #[test]
    fn robot_on_target_reduces_trace() {
        let prior = Estimate::new(v(&[0.5]), scalar(1.0), 1).unwrap();
        let g = SensorMatrix::full(1, 1);
        let p = predicted_posterior_cov(&[v(&[0.5])], &prior, &g, &scalar_lib()).unwrap();
        // P = 1 / (1 + 1.8)
        assert!((p[(0, 0)] - 1.0 / 2.8).abs() < 1e-14);
        assert!(p.trace() < 1.0);
    }

    #[test]
    fn trace_decreases_as_robot_approaches() {
        let prior = Estimate::new(v(&[0.0]), scalar(1.0), 1).unwrap();
        let g = SensorMatrix::full(1, 1);
        let traces: Vec<f64> = (0..=10)
            .map(|d| {
                predicted_posterior_cov(&[v(&[d as f64])], &prior, &g, &scalar_lib())
                    .unwrap()
                    .trace()
            })
            .collect();
        assert!(traces.windows(2).all(|w| w[0] < w[1]), "{traces:?}");
    }

    #[test]
    fn no_sensors_returns_prior() {
        let prior = Estimate::new(v(&[0.0, 0.0]), DMatrix::identity(2, 2), 2).unwrap();
        let g = SensorMatrix::from_rows(&[vec![0, 0, 0]]).unwrap();
        let p = predicted_posterior_cov(&[v(&[0.0, 0.0])], &prior, &g, &lib()).unwrap();
        assert_eq!(p, prior.covariance);
    }

    #[test]
    fn target_posterior_matches_team_blocks() {
        let g = SensorMatrix::from_rows(&[vec![1, 1, 1], vec![0, 0, 1], vec![1, 1, 0]]).unwrap();
        let robots = vec![v(&[0.0, 1.0]), v(&[3.0, -1.0]), v(&[-2.0, 2.0])];
        let covs = vec![
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.7]),
            DMatrix::from_row_slice(2, 2, &[0.5, -0.1, -0.1, 0.9]),
        ];
        let prior = Estimate::from_blocks(&[v(&[1.0, 1.0]), v(&[-1.0, 0.0])], &covs).unwrap();
        let full = predicted_posterior_cov(&robots, &prior, &g, &lib()).unwrap();
        let rows = TargetRows::new(&g.all_indices(), &lib());
        for j in 0..2 {
            let (blk, _) = target_posterior(&robots, &prior.target_state(j), &covs[j], &rows, &lib(), false);
            let want = full.view((2 * j, 2 * j), (2, 2));
            assert!((blk - want).norm() < 1e-12);
        }
        // cross blocks vanish
        assert!(full.view((0, 2), (2, 2)).norm() < 1e-12);
    }

    #[test]
    fn target_posterior_gradient_matches_differences() {
        let g = SensorMatrix::from_rows(&[vec![1, 1, 1], vec![0, 1, 1]]).unwrap();
        let rows = TargetRows::new(&g.all_indices(), &lib());
        let robots = vec![v(&[0.3, 1.0]), v(&[2.0, -1.5])];
        let e = v(&[1.0, 0.2]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.8]);
        let (_, grad) = target_posterior(&robots, &e, &cov, &rows, &lib(), true);
        let grad = grad.unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for k in 0..2 {
                let mut plus = robots.clone();
                let mut minus = robots.clone();
                plus[i][k] += h;
                minus[i][k] -= h;
                let tp = target_posterior(&plus, &e, &cov, &rows, &lib(), false).0.trace();
                let tm = target_posterior(&minus, &e, &cov, &rows, &lib(), false).0.trace();
                let fd = (tp - tm) / (2.0 * h);
                assert!((fd - grad[i][k]).abs() < 1e-8, "robot {i} axis {k}: {fd} vs {}", grad[i][k]);
            }
        }
    }

    mod information_form {
        use super::*;
        use proptest::prelude::*;

        fn spd(n: usize, seed: &[f64], floor: f64) -> DMatrix<f64> {
            let l = DMatrix::from_iterator(n, n, seed.iter().copied().cycle().take(n * n));
            &l * l.transpose() + DMatrix::identity(n, n) * floor
        }

        fn instance() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
            (1usize..=8, 1usize..=8).prop_flat_map(|(n, k)| {
                (
                    Just(n),
                    Just(k),
                    prop::collection::vec(-1.0..1.0f64, n * n),
                    prop::collection::vec(-2.0..2.0f64, k * n),
                    prop::collection::vec(0.05..5.0f64, k),
                    prop::collection::vec(-3.0..3.0f64, n + k),
                )
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            #[test]
            fn gain_form_matches_information_form((n, k, ps, hs, rs, ys) in instance()) {
                let prior_cov = spd(n, &ps, 0.1);
                let h = DMatrix::from_row_slice(k, n, &hs);
                let r = DMatrix::from_diagonal(&DVector::from_vec(rs));
                let prior = Estimate::new(DVector::from_column_slice(&ys[..n]), prior_cov.clone(), n).unwrap();
                let y = DVector::from_column_slice(&ys[n..]);
                let out = update(&prior, &y, &h, &r).unwrap();
                prop_assert!(!out.regularized);

                let info = prior_cov.clone().try_inverse().unwrap()
                    + h.transpose() * r.clone().try_inverse().unwrap() * &h;
                let oracle = info.try_inverse().unwrap();
                let p = &out.estimate.covariance;
                let rel = (p - &oracle).norm() / oracle.norm();
                prop_assert!(rel < 1e-8, "relative error {rel}");

                prop_assert!(crate::linalg::is_symmetric(p, 1e-12 * (1.0 + p.norm())));
                prop_assert!(crate::linalg::min_eigenvalue(p) >= -1e-10);
                prop_assert!(p.trace() <= prior_cov.trace() + 1e-12);
            }
        }
    }
}
