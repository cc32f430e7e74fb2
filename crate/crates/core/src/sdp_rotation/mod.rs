//! Rotation synchronization from anonymous observations.
//!
//! For every epoch `k` and drone `j`, the observations of `j` are summed and
//! rotated into `j`'s initial frame with its odometry yaw, giving a 2-vector
//! `P_kʲ`. With the unknown initial yaws stacked as `R = [R₀ … R_{N-1}]`
//! (2 x 2N, each `R_j` mapping drone `j`'s initial frame to the world), the
//! mutual constraint says `Σ_j R_j P_kʲ = 0`. The least-squares cost is
//! `Σ_k |R P_k|² = tr(Q Z)` with `Q = Σ_k P_k P_kᵀ` and `Z = RᵀR`; relaxing
//! `Z` to any PSD matrix with identity 2x2 diagonal blocks gives the convex
//! problem solved here.

pub mod ipm;

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project_to_so2, GeometryError, YawVector};
use crate::simulator::EpochRecord;

pub use ipm::IpmSettings;

/// Relative eigenvalue threshold for [`numeric_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RotationError {
    #[error("no epoch records")]
    EmptyInput,
    #[error("epoch {epoch} has odometry for {got} drones, expected {expected}")]
    SizeMismatch {
        epoch: usize,
        expected: usize,
        got: usize,
    },
    #[error("SDP solver did not converge in {iterations} iterations (primal {primal_residual:.2e}, dual {dual_residual:.2e}, gap {gap:.2e})")]
    SolverDiverged {
        iterations: usize,
        primal_residual: f64,
        dual_residual: f64,
        gap: f64,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// The constant cost matrix of the rotation problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QMatrix {
    #[serde(with = "crate::matrix_serde")]
    pub q: DMatrix<f64>,
    pub n: usize,
    pub n_epochs: usize,
}

impl QMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            q: DMatrix::zeros(2 * n, 2 * n),
            n,
            n_epochs: 0,
        }
    }

    pub fn block(&self, i: usize, j: usize) -> Matrix2<f64> {
        self.q.fixed_view::<2, 2>(2 * i, 2 * j).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdpSolution {
    #[serde(with = "crate::matrix_serde")]
    pub z: DMatrix<f64>,
    pub objective: f64,
    pub numeric_rank: usize,
    pub complete: bool,
    pub rotations: YawVector,
    pub iterations: usize,
    pub duality_gap: f64,
}

fn total_order(a: &Vector2<f64>, b: &Vector2<f64>) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}

/// Per-epoch stacked vector `P_k` (length 2N).
///
/// Each observer's vectors are summed in a canonical order so the result does
/// not depend on how the detections happen to be listed.
pub fn epoch_vector(record: &EpochRecord) -> DVector<f64> {
    let n = record.n_drones();
    let mut p = DVector::zeros(2 * n);
    for j in 0..n {
        let mut xy: Vec<Vector2<f64>> = record
            .observations_of(j)
            .map(|o| Vector2::new(o.vector.x, o.vector.y))
            .collect();
        xy.sort_by(total_order);
        let sum = xy.iter().fold(Vector2::zeros(), |acc, v| acc + v);
        let rotated = record.odometry.yaws.yaws[j].rotate2(&sum);
        p[2 * j] = rotated.x;
        p[2 * j + 1] = rotated.y;
    }
    p
}

pub fn build_q(records: &[EpochRecord]) -> Result<QMatrix, RotationError> {
    let first = records.first().ok_or(RotationError::EmptyInput)?;
    let n = first.n_drones();
    let mut q = DMatrix::zeros(2 * n, 2 * n);
    for r in records {
        if r.n_drones() != n || r.odometry.positions.len() != n {
            return Err(RotationError::SizeMismatch {
                epoch: r.epoch,
                expected: n,
                got: r.n_drones(),
            });
        }
        let p = epoch_vector(r);
        q.ger(1.0, &p, &p, 1.0);
    }
    Ok(QMatrix {
        q,
        n,
        n_epochs: records.len(),
    })
}

/// `Z = RᵀR` for the given yaws.
pub fn gram_from_yaws(yaws: &YawVector) -> DMatrix<f64> {
    let n = yaws.len();
    let mut r = DMatrix::zeros(2, 2 * n);
    for (j, y) in yaws.yaws.iter().enumerate() {
        r.fixed_view_mut::<2, 2>(0, 2 * j).copy_from(&y.matrix());
    }
    r.transpose() * r
}

/// Unrelaxed objective `tr(Q RᵀR)`.
pub fn rotation_objective(q: &QMatrix, yaws: &YawVector) -> f64 {
    let mut total = 0.0;
    for i in 0..q.n {
        let ri = yaws.yaws[i].matrix();
        for j in 0..q.n {
            // tr(Q_ij Z_ji),  Z_ji = R_jᵀ R_i
            let zji = yaws.yaws[j].matrix().transpose() * ri;
            total += (q.block(i, j) * zji).trace();
        }
    }
    total
}

/// Count eigenvalues above `tol · λ_max`.
pub fn numeric_rank(z: &DMatrix<f64>, tol: f64) -> usize {
    if z.is_empty() {
        return 0;
    }
    let eig = z.clone().symmetric_eigenvalues();
    let lmax = eig.max();
    if lmax <= 0.0 {
        return 0;
    }
    eig.iter().filter(|&&v| v > tol * lmax).count()
}

/// Rotations from the top-2 eigenpairs of `z`, gauge-fixed to entry 0.
pub fn extract_rotations(z: &DMatrix<f64>) -> Result<YawVector, RotationError> {
    let n = z.nrows() / 2;
    let eig = z.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut y = DMatrix::zeros(2 * n, 2);
    for (col, &k) in order.iter().take(2).enumerate() {
        let scale = eig.eigenvalues[k].max(0.0).sqrt();
        y.set_column(col, &(eig.eigenvectors.column(k) * scale));
    }
    let y0 = y.fixed_view::<2, 2>(0, 0).into_owned();
    if y0.determinant() < 0.0 {
        y.column_mut(1).neg_mut();
    }
    let mut rotations = Vec::with_capacity(n);
    for j in 0..n {
        let block = y.fixed_view::<2, 2>(2 * j, 0).transpose();
        rotations.push(project_to_so2(&block)?);
    }
    Ok(YawVector { yaws: rotations }.gauge_fixed())
}

pub fn solve_sdp(q: &QMatrix) -> Result<SdpSolution, RotationError> {
    solve_sdp_with(q, &IpmSettings::default(), DEFAULT_RANK_TOL)
}

pub fn solve_sdp_with(
    q: &QMatrix,
    settings: &IpmSettings,
    rank_tol: f64,
) -> Result<SdpSolution, RotationError> {
    let n = q.n;
    if q.q.iter().all(|&v| v == 0.0) {
        return Ok(SdpSolution {
            z: DMatrix::identity(2 * n, 2 * n),
            objective: 0.0,
            numeric_rank: 2 * n,
            complete: false,
            rotations: YawVector::identity(n),
            iterations: 0,
            duality_gap: 0.0,
        });
    }
    let sol = match ipm::solve(&q.q, settings) {
        Ok(s) => s,
        Err(ipm::IpmFailure::IterationLimit(s)) | Err(ipm::IpmFailure::Numerical(s)) => {
            return Err(RotationError::SolverDiverged {
                iterations: s.iterations,
                primal_residual: s.primal_residual,
                dual_residual: s.dual_residual,
                gap: s.relative_gap,
            })
        }
    };
    let rank = numeric_rank(&sol.x, rank_tol);
    let rotations = extract_rotations(&sol.x)?;
    Ok(SdpSolution {
        objective: sol.primal_objective,
        numeric_rank: rank,
        complete: rank <= n + 1,
        rotations,
        iterations: sol.iterations,
        duality_gap: (sol.primal_objective - sol.dual_objective).abs(),
        z: sol.x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compose;
    use crate::geometry::{apply_yaw, yaw_mae};
    use crate::simulator::{World, WorldConfig};
    use nalgebra::Vector3;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene(n: usize, seed: u64, epochs: usize, sigma: f64) -> (Vec<EpochRecord>, YawVector) {
        let cfg = WorldConfig {
            n_drones: n,
            seed,
            obs_noise_sigma: sigma,
            sensor_range: 30.0,
            ..WorldConfig::default()
        };
        let (mut world, truth) = World::spawn(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut recs = Vec::new();
        for _ in 0..epochs {
            recs.push(world.scan_epoch());
            for d in 0..n {
                let odo = world.odometry();
                let step = Vector3::new(
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-1.5..1.5),
                    0.0,
                );
                world.move_drone(d, &[odo.positions[d] + step]);
            }
        }
        (recs, truth.yaws())
    }

    /// Naive selector-matrix construction, independent of `build_q`.
    fn brute_force_q(records: &[EpochRecord]) -> DMatrix<f64> {
        let n = records[0].n_drones();
        let mut q = DMatrix::zeros(2 * n, 2 * n);
        let selector = |j: usize| {
            let mut c = DMatrix::zeros(2, 2 * n);
            c[(0, 2 * j)] = 1.0;
            c[(1, 2 * j + 1)] = 1.0;
            c
        };
        for r in records {
            let p: Vec<DVector<f64>> = (0..n)
                .map(|j| {
                    let mut s = DVector::zeros(2);
                    for o in r.observations.iter().filter(|o| o.observer == j) {
                        s[0] += o.vector.x;
                        s[1] += o.vector.y;
                    }
                    let rot =
                        DMatrix::from_fn(2, 2, |a, b| r.odometry.yaws.yaws[j].matrix()[(a, b)]);
                    rot * s
                })
                .collect();
            for m in 0..n {
                for k in 0..n {
                    q += selector(k).transpose() * &p[k] * p[m].transpose() * selector(m);
                }
            }
        }
        q
    }

    /// Explicit sum of squared per-epoch residuals.
    fn residual_objective(records: &[EpochRecord], yaws: &YawVector) -> f64 {
        records
            .iter()
            .map(|r| {
                let mut e = Vector3::zeros();
                for o in &r.observations {
                    let j = o.observer;
                    let rot = compose(yaws.yaws[j], r.odometry.yaws.yaws[j]);
                    e += apply_yaw(rot, &Vector3::new(o.vector.x, o.vector.y, 0.0));
                }
                e.norm_squared()
            })
            .sum()
    }

    #[test]
    fn empty_input_rejected() {
        assert_eq!(build_q(&[]), Err(RotationError::EmptyInput));
    }

    #[test]
    fn no_observations_give_zero_q_and_identity_solution() {
        let cfg = WorldConfig {
            n_drones: 3,
            sensor_range: 0.01,
            ..WorldConfig::default()
        };
        let (mut world, _) = World::spawn(cfg).unwrap();
        let q = build_q(&[world.scan_epoch()]).unwrap();
        assert!(q.q.iter().all(|&v| v == 0.0));
        let sol = solve_sdp(&q).unwrap();
        assert_eq!(sol.z, DMatrix::identity(6, 6));
        assert!(!sol.complete);
        assert_eq!(sol.numeric_rank, 6);
        assert!(sol.rotations.yaws.iter().all(|r| r.theta == 0.0));
    }

    #[test]
    fn q_matches_brute_force_and_is_psd() {
        for seed in 0..5 {
            let (recs, _) = scene(4, seed, 3, 0.05);
            let q = build_q(&recs).unwrap();
            let bf = brute_force_q(&recs);
            assert!((&q.q - &bf).norm() < 1e-9 * (1.0 + bf.norm()));
            assert!((&q.q - q.q.transpose()).norm() < 1e-12 * (1.0 + q.q.norm()));
            assert!(q.q.clone().symmetric_eigenvalues().min() >= -1e-9 * (1.0 + q.q.norm()));
        }
    }

    #[test]
    fn objective_matches_residual_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..5 {
            let (recs, truth) = scene(5, seed, 4, 0.1);
            let q = build_q(&recs).unwrap();
            let at_truth = residual_objective(&recs, &truth);
            assert!((rotation_objective(&q, &truth) - at_truth).abs() < 1e-8 * (1.0 + at_truth));
            let z = gram_from_yaws(&truth);
            assert!(((&q.q * z).trace() - at_truth).abs() < 1e-8 * (1.0 + at_truth));
            let random = YawVector::from_angles(
                &(0..5)
                    .map(|_| rng.random_range(-3.0..3.0))
                    .collect::<Vec<_>>(),
            );
            let direct = residual_objective(&recs, &random);
            assert!((rotation_objective(&q, &random) - direct).abs() < 1e-8 * (1.0 + direct));
        }
    }

    #[test]
    fn q_invariant_to_observation_order() {
        let (recs, _) = scene(5, 3, 2, 0.05);
        let base = build_q(&recs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut shuffled = recs.clone();
        for r in &mut shuffled {
            for j in 0..5 {
                let idx: Vec<usize> = (0..r.observations.len())
                    .filter(|&a| r.observations[a].observer == j)
                    .collect();
                let mut vals: Vec<_> = idx.iter().map(|&a| r.observations[a].clone()).collect();
                vals.shuffle(&mut rng);
                for (a, v) in idx.iter().zip(vals) {
                    r.observations[*a] = v;
                }
            }
        }
        assert_eq!(build_q(&shuffled).unwrap().q, base.q);
    }

    /// Golden-section minimizer of a unimodal function on [lo, hi].
    fn golden(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut a = hi - g * (hi - lo);
        let mut b = lo + g * (hi - lo);
        while hi - lo > 1e-12 {
            if f(a) < f(b) {
                hi = b;
            } else {
                lo = a;
            }
            a = hi - g * (hi - lo);
            b = lo + g * (hi - lo);
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn two_drone_objective_minimized_at_truth() {
        let (recs, truth) = scene(2, 4, 1, 0.0);
        let q = build_q(&recs).unwrap();
        let f = |t: f64| rotation_objective(&q, &YawVector::from_angles(&[0.0, t]));
        // bracket around the coarse minimum, then refine
        let coarse = (0..720)
            .map(|k| -std::f64::consts::PI + k as f64 * std::f64::consts::PI / 360.0)
            .min_by(|a, b| f(*a).total_cmp(&f(*b)))
            .unwrap();
        let best = golden(f, coarse - 0.01, coarse + 0.01);
        assert!(crate::geometry::wrap_angle(best - truth.yaws[1].theta).abs() < 1e-6);
    }

    #[test]
    fn numeric_rank_examples() {
        assert_eq!(numeric_rank(&DMatrix::identity(8, 8), DEFAULT_RANK_TOL), 8);
        let z = gram_from_yaws(&YawVector::from_angles(&[0.0, 0.4, -2.0, 1.3]));
        assert_eq!(numeric_rank(&z, DEFAULT_RANK_TOL), 2);
    }

    #[test]
    fn noiseless_three_drones_recovered() {
        for seed in 0..5 {
            let (recs, truth) = scene(3, seed, 6, 0.0);
            let q = build_q(&recs).unwrap();
            let sol = solve_sdp(&q).unwrap();
            assert!(
                yaw_mae(&sol.rotations, &truth).unwrap() < 1e-6,
                "seed {seed}"
            );
            assert_eq!(sol.numeric_rank, 2);
            assert_eq!(sol.rotations.yaws[0].theta, 0.0);
            for b in 0..3 {
                let blk = sol.z.view((2 * b, 2 * b), (2, 2));
                assert!((blk - DMatrix::<f64>::identity(2, 2)).norm() < 1e-7);
            }
            assert!(sol.z.clone().symmetric_eigenvalues().min() >= -1e-7);
        }
    }

    #[test]
    fn relaxation_lower_bounds_truth_objective() {
        for seed in 0..8 {
            let (recs, truth) = scene(5, seed, 5, 0.1);
            let q = build_q(&recs).unwrap();
            let sol = solve_sdp(&q).unwrap();
            let at_truth = rotation_objective(&q, &truth);
            assert!(sol.objective <= at_truth + 1e-7 * (1.0 + at_truth));
            assert!(sol.duality_gap <= 1e-7 * (1.0 + sol.objective.abs()));
        }
    }

    #[test]
    fn gauge_offset_changes_nothing() {
        // Rotating every drone's initial frame by a common yaw leaves the
        // observations, and hence Q and the gauge-fixed estimate, unchanged.
        let (recs, truth) = scene(4, 12, 6, 0.02);
        let q = build_q(&recs).unwrap();
        let sol = solve_sdp(&q).unwrap();
        let shifted =
            YawVector::from_angles(&truth.angles().iter().map(|t| t + 0.9).collect::<Vec<_>>());
        let (a, b) = (
            rotation_objective(&q, &truth),
            rotation_objective(&q, &shifted),
        );
        assert!((a - b).abs() < 1e-8 * (1.0 + a));
        assert!(yaw_mae(&sol.rotations, &shifted.gauge_fixed()).unwrap() < 0.05);
        assert!(yaw_mae(&shifted.gauge_fixed(), &truth).unwrap() < 1e-12);
    }

    #[test]
    fn serializes_row_major() {
        let q = QMatrix {
            q: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            n: 1,
            n_epochs: 1,
        };
        let json = serde_json::to_string(&q).unwrap();
        assert_eq!(json, r#"{"q":[[1.0,2.0],[3.0,4.0]],"n":1,"n_epochs":1}"#);
        let back: QMatrix = serde_json::from_str(&json).unwrap();
        assert_eq!(back, q);
    }
}
