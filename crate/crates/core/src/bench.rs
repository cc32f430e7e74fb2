//! Head-to-head comparison of the relaxation against the local solvers.

use std::io::Write;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{solve_gn, solve_lm, LocalSolveReport};
use crate::config::{BenchmarkParams, ConfigError};
use crate::geometry::{yaw_mae, YawVector};
use crate::sdp_rotation::{build_q, solve_sdp, QMatrix};
use crate::simulator::{EpochRecord, GroundTruth, ScanLabels, SimError, World, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SDP")]
    Sdp,
    #[serde(rename = "LM")]
    Lm,
    #[serde(rename = "GN")]
    Gn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub method: Method,
    pub n_drones: usize,
    pub sigma: f64,
    pub trial: usize,
    pub yaw_mae: f64,
    pub solve_time: f64,
    pub converged: bool,
}

/// Final objective of every method on one trial's shared cost matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialObjectives {
    pub n_drones: usize,
    pub sigma: f64,
    pub trial: usize,
    /// `None` if the relaxation failed to solve.
    pub sdp: Option<f64>,
    pub lm: f64,
    pub gn: f64,
}

#[derive(Debug, Clone, Default)]
pub struct BenchmarkResult {
    pub rows: Vec<BenchmarkRow>,
    pub objectives: Vec<TrialObjectives>,
}

/// A scene shared by all methods within one trial.
pub struct Scene {
    pub records: Vec<EpochRecord>,
    /// Hidden identities, parallel to `records`.
    pub labels: Vec<ScanLabels>,
    pub truth: GroundTruth,
    pub q: QMatrix,
}

pub fn trial_seed(base: u64, n: usize, sigma_index: usize, trial: usize) -> u64 {
    base.wrapping_mul(1_000_003)
        .wrapping_add(n as u64 * 10_007)
        .wrapping_add(sigma_index as u64 * 101)
        .wrapping_add(trial as u64)
}

/// Simulate `epochs` scans with random planar moves in between.
pub fn build_scene(world: WorldConfig, epochs: usize, motion: f64) -> Result<Scene, SimError> {
    let n = world.n_drones;
    let seed = world.seed;
    let (mut w, truth) = World::spawn(world)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_7665);
    let mut records = Vec::with_capacity(epochs);
    let mut labels = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (record, label) = w.scan_epoch_labeled();
        records.push(record);
        labels.push(label);
        for d in 0..n {
            let p = w.odometry().positions[d];
            let step = if motion > 0.0 {
                Vector3::new(
                    rng.random_range(-motion..motion),
                    rng.random_range(-motion..motion),
                    0.0,
                )
            } else {
                Vector3::zeros()
            };
            w.move_drone(d, &[p + step]);
        }
    }
    let q = build_q(&records).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    Ok(Scene {
        records,
        labels,
        truth,
        q,
    })
}

fn random_init(n: usize, rng: &mut ChaCha8Rng) -> YawVector {
    YawVector::from_angles(
        &(0..n)
            .map(|_| std::f64::consts::PI - rng.random::<f64>() * std::f64::consts::TAU)
            .collect::<Vec<_>>(),
    )
}

/// Run every (n, σ, trial) cell. Trials run one after another so that the
/// timings are not disturbed by each other.
pub fn run_benchmark(
    params: &BenchmarkParams,
    world: &WorldConfig,
) -> Result<BenchmarkResult, ConfigError> {
    let mut result = BenchmarkResult::default();
    for &n in &params.n_drones {
        for (si, &sigma) in params.sigmas.iter().enumerate() {
            for trial in 0..params.trials {
                let seed = trial_seed(params.seed, n, si, trial);
                let cfg = WorldConfig {
                    n_drones: n,
                    obs_noise_sigma: sigma,
                    seed,
                    ..world.clone()
                };
                let scene = build_scene(cfg, params.epochs_for(n), params.motion)?;
                let truth = scene.truth.yaws();
                let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x696e_6974);
                let init = random_init(n, &mut init_rng);

                let t = Instant::now();
                let sdp = solve_sdp(&scene.q);
                let sdp_time = t.elapsed().as_secs_f64();
                let lm = solve_lm(&scene.q, &init);
                let gn = solve_gn(&scene.q, &init);

                let time = |s: f64| if params.record_timings { s } else { 0.0 };
                let row = |method, mae: f64, solve_time, converged| BenchmarkRow {
                    method,
                    n_drones: n,
                    sigma,
                    trial,
                    yaw_mae: mae,
                    solve_time: time(solve_time),
                    converged,
                };
                let local_row = |method, r: &LocalSolveReport| {
                    row(
                        method,
                        yaw_mae(&r.yaws, &truth).unwrap_or(f64::NAN),
                        r.wall_time,
                        r.converged,
                    )
                };
                result.rows.push(match &sdp {
                    Ok(s) => row(
                        Method::Sdp,
                        yaw_mae(&s.rotations, &truth).unwrap_or(f64::NAN),
                        sdp_time,
                        true,
                    ),
                    Err(_) => row(Method::Sdp, f64::NAN, sdp_time, false),
                });
                result.rows.push(local_row(Method::Lm, &lm));
                result.rows.push(local_row(Method::Gn, &gn));
                result.objectives.push(TrialObjectives {
                    n_drones: n,
                    sigma,
                    trial,
                    sdp: sdp.as_ref().ok().map(|s| s.objective),
                    lm: lm.objective,
                    gn: gn.objective,
                });
            }
        }
    }
    Ok(result)
}

/// CSV with a header row and one row per (method, trial).
pub fn write_csv<W: Write>(rows: &[BenchmarkRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string(rows: &[BenchmarkRow]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("csv is utf-8")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchmarkParams {
        BenchmarkParams {
            n_drones: vec![2],
            sigmas: vec![0.0],
            trials: 1,
            ..BenchmarkParams::default()
        }
    }

    #[test]
    fn single_noiseless_cell() {
        let world = WorldConfig {
            sensor_range: 30.0,
            ..WorldConfig::default()
        };
        let res = run_benchmark(&small(), &world).unwrap();
        assert_eq!(res.rows.len(), 3);
        for r in &res.rows {
            assert!(r.yaw_mae < 1e-6, "{r:?}");
        }
        let methods: Vec<Method> = res.rows.iter().map(|r| r.method).collect();
        assert_eq!(methods, vec![Method::Sdp, Method::Lm, Method::Gn]);
    }

    #[test]
    fn csv_layout() {
        let rows = vec![BenchmarkRow {
            method: Method::Lm,
            n_drones: 3,
            sigma: 0.05,
            trial: 7,
            yaw_mae: 0.25,
            solve_time: 0.5,
            converged: true,
        }];
        assert_eq!(
            csv_string(&rows),
            "method,n_drones,sigma,trial,yaw_mae,solve_time,converged\nLM,3,0.05,7,0.25,0.5,true\n"
        );
    }

    #[test]
    fn untimed_output_is_reproducible() {
        let params = BenchmarkParams {
            n_drones: vec![3],
            sigmas: vec![0.05],
            trials: 2,
            record_timings: false,
            ..BenchmarkParams::default()
        };
        let world = WorldConfig::default();
        let a = csv_string(&run_benchmark(&params, &world).unwrap().rows);
        let b = csv_string(&run_benchmark(&params, &world).unwrap().rows);
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 1 + 2 * 3);
    }
}
