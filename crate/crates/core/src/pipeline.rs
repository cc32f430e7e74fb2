//! The observe, solve, move loop.

use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::Config;
use crate::correspondence::{
    assign_epochs, confirmed_records, default_gate, recover, screen_mutual, screen_tolerance,
    CorrespondenceGraph, Recovery,
};
use crate::geometry::{apply_yaw, yaw_mae, YawVector};
use crate::planner::{plan_move, PlanContext};
use crate::sdp_rotation::{build_q, solve_sdp_with, IpmSettings, RotationError, SdpSolution};
use crate::simulator::{write_trace, EpochRecord, GroundTruth, SimError, World};

const PLANNER_STREAM: u64 = 0x706c_616e;
const FALSE_POSITIVE_STREAM: u64 = 0x6661_6c73;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error(transparent)]
    Rotation(#[from] RotationError),
    #[error("epoch cap of {} reached without convergence", .0.epochs_run)]
    MaxEpochsExceeded(Box<RunReport>),
}

/// Solver state after one solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub epochs: usize,
    pub objective: f64,
    pub numeric_rank: usize,
    pub complete: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct StageTimes {
    pub scan: f64,
    pub rotation: f64,
    pub correspondence: f64,
    pub planning: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalEstimate {
    pub rotations: YawVector,
    /// Drone 0's initial frame; `None` where the graph does not reach.
    pub translations: Vec<Option<Vector3<f64>>>,
    pub graph: CorrespondenceGraph,
    pub yaw_mae: f64,
    /// Over reachable drones.
    pub translation_rmse: f64,
    pub translation_spread: f64,
    pub unreachable: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub n_drones: usize,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
    pub iterations: Vec<IterationRecord>,
    pub final_estimate: Option<FinalEstimate>,
    pub planner_failures: usize,
    pub times: StageTimes,
}

/// Rotations, correspondences and translations from a batch of epochs.
#[derive(Debug, Clone)]
pub struct Localization {
    pub sdp: SdpSolution,
    pub recovery: Recovery,
    pub gate: f64,
    pub n_epochs: usize,
    /// Seconds spent in the rotation and correspondence stages.
    pub rotation_time: f64,
    pub correspondence_time: f64,
}

impl Localization {
    pub fn iteration(&self) -> IterationRecord {
        IterationRecord {
            epochs: self.n_epochs,
            objective: self.sdp.objective,
            numeric_rank: self.sdp.numeric_rank,
            complete: self.sdp.complete,
        }
    }
}

/// Screen, solve rotations, match, and recover translations.
///
/// When the first solve passes the rank test, rotations are re-solved from
/// the mutually confirmed detections only, which removes any spurious
/// detection that slipped through the screen.
pub fn localize(
    records: &[EpochRecord],
    sigma: f64,
    rank_tol: f64,
) -> Result<Localization, RotationError> {
    let settings = IpmSettings::default();
    let t0 = Instant::now();
    let screened = screen_mutual(records, screen_tolerance(sigma));
    let mut sdp = solve_sdp_with(&build_q(&screened)?, &settings, rank_tol)?;
    let mut rotation_time = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut gate = default_gate(&screened, sigma, sdp.objective);
    let mut recovery = recover(
        &assign_epochs(&screened, &sdp.rotations, gate),
        &screened,
        &sdp.rotations,
    );
    let mut correspondence_time = t1.elapsed().as_secs_f64();

    let kept = confirmed_records(&screened, &recovery.graph);
    let n_kept: usize = kept.iter().map(|r| r.observations.len()).sum();
    let n_screened: usize = screened.iter().map(|r| r.observations.len()).sum();
    if sdp.complete && n_kept > 0 && n_kept < n_screened {
        let t2 = Instant::now();
        sdp = solve_sdp_with(&build_q(&kept)?, &settings, rank_tol)?;
        rotation_time += t2.elapsed().as_secs_f64();
        let t3 = Instant::now();
        gate = default_gate(&kept, sigma, sdp.objective);
        recovery = recover(
            &assign_epochs(&screened, &sdp.rotations, gate),
            &screened,
            &sdp.rotations,
        );
        correspondence_time += t3.elapsed().as_secs_f64();
    }
    Ok(Localization {
        sdp,
        recovery,
        gate,
        n_epochs: records.len(),
        rotation_time,
        correspondence_time,
    })
}

/// Summary of a localization against ground truth.
pub fn evaluate(loc: &Localization, truth: &GroundTruth) -> FinalEstimate {
    let truth_t = truth.translations();
    let errors: Vec<f64> = loc
        .recovery
        .translations
        .iter()
        .zip(&truth_t)
        .filter_map(|(est, t)| est.map(|e| (e - t).norm_squared()))
        .collect();
    let rmse = if errors.is_empty() {
        0.0
    } else {
        (errors.iter().sum::<f64>() / errors.len() as f64).sqrt()
    };
    FinalEstimate {
        rotations: loc.sdp.rotations.clone(),
        translations: loc.recovery.translations.clone(),
        graph: loc.recovery.graph.clone(),
        yaw_mae: yaw_mae(&loc.sdp.rotations, &truth.yaws()).unwrap_or(f64::NAN),
        translation_rmse: rmse,
        translation_spread: loc.recovery.spread,
        unreachable: loc.recovery.unreachable(),
    }
}

fn spurious_detection(rng: &mut ChaCha8Rng, world: &World) -> (usize, Vector3<f64>) {
    let cfg = world.config();
    let observer = rng.random_range(0..cfg.n_drones);
    let range = rng.random_range(0.5..cfg.sensor_range.max(0.6));
    let bearing = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let height = (cfg.arena.max[2] - cfg.arena.min[2]).max(0.1);
    let z = rng.random_range(-height..height);
    let planar = (range * range - z * z).max(0.0).sqrt();
    (
        observer,
        Vector3::new(planar * bearing.cos(), planar * bearing.sin(), z),
    )
}

/// Run the full initialization loop. `trace` receives every scanned epoch as
/// JSON Lines when given.
pub fn run_init_with_trace(config: &Config, trace: Option<&Path>) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let start = Instant::now();
    let p = &config.pipeline;
    let (mut world, truth) = World::spawn(config.world.clone())?;
    let seed = config.world.seed;
    let mut plan_rng = ChaCha8Rng::seed_from_u64(seed ^ PLANNER_STREAM);
    let mut fp_rng = ChaCha8Rng::seed_from_u64(seed ^ FALSE_POSITIVE_STREAM);
    let n = config.world.n_drones;

    let mut records: Vec<EpochRecord> = Vec::new();
    let mut iterations = Vec::new();
    let mut times = StageTimes::default();
    let mut latest: Option<Localization> = None;
    let mut planner_failures = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for _ in 0..p.max_epochs {
        let t = Instant::now();
        let mut record = world.scan_epoch();
        for _ in 0..p.false_positives_per_epoch {
            let (observer, v) = spurious_detection(&mut fp_rng, &world);
            record = record.inject_false_positive(observer, &[v]);
        }
        records.push(record);
        times.scan += t.elapsed().as_secs_f64();

        if records.len() >= p.min_num_observations {
            let loc = localize(&records, config.world.obs_noise_sigma, p.rank_tol)?;
            times.rotation += loc.rotation_time;
            times.correspondence += loc.correspondence_time;
            let it = loc.iteration();
            let connected = loc.recovery.unreachable().is_empty();
            iterations.push(it.clone());
            latest = Some(loc);
            if it.objective <= p.tau * records.len() as f64 && it.complete && connected {
                stop_reason = StopReason::Converged;
                break;
            }
        }

        let t = Instant::now();
        let odometry = world.odometry();
        let last = records.last().expect("just pushed");
        for d in 0..n {
            let heading = odometry.yaws.yaws[d];
            let mut ctx = PlanContext {
                self_position: odometry.positions[d],
                local_observations: last
                    .observations_of(d)
                    .map(|o| apply_yaw(heading, &o.vector))
                    .collect(),
                obstacles: world.local_obstacles(d),
                rng: &mut plan_rng,
                params: config.planner,
            };
            match plan_move(&mut ctx) {
                Ok(path) if !path.is_empty() => world.move_drone(d, &path),
                Ok(_) => {}
                Err(_) => planner_failures += 1,
            }
        }
        times.planning += t.elapsed().as_secs_f64();
    }

    if let Some(path) = trace {
        write_trace(path, &records)?;
    }
    times.total = start.elapsed().as_secs_f64();
    if !p.record_timings {
        times = StageTimes::default();
    }
    let report = RunReport {
        seed,
        n_drones: n,
        epochs_run: records.len(),
        stop_reason,
        iterations,
        final_estimate: latest.as_ref().map(|l| evaluate(l, &truth)),
        planner_failures,
        times,
    };
    match stop_reason {
        StopReason::Converged => Ok(report),
        StopReason::MaxEpochs => Err(PipelineError::MaxEpochsExceeded(Box::new(report))),
    }
}

pub fn run_init(config: &Config) -> Result<RunReport, PipelineError> {
    run_init_with_trace(config, None)
}

/// The report whether or not the epoch cap was hit.
pub fn run_init_report(config: &Config) -> Result<RunReport, PipelineError> {
    match run_init(config) {
        Ok(r) => Ok(r),
        Err(PipelineError::MaxEpochsExceeded(r)) => Ok(*r),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::Formation;

    fn config(n: usize, seed: u64, sigma: f64) -> Config {
        let mut c = Config::default();
        c.world.n_drones = n;
        c.world.seed = seed;
        c.world.obs_noise_sigma = sigma;
        c.world.sensor_range = 30.0;
        c
    }

    #[test]
    fn two_drones_finish_after_one_solve() {
        for seed in 0..5 {
            let mut c = config(2, seed, 0.0);
            c.pipeline.min_num_observations = 1;
            let r = run_init(&c).unwrap();
            assert_eq!(r.iterations.len(), 1);
            assert_eq!(r.epochs_run, 1);
            let f = r.final_estimate.unwrap();
            assert!(f.yaw_mae < 1e-6);
            assert!(f.translation_rmse < 1e-6);
        }
    }

    #[test]
    fn epochs_accumulate_and_stages_fit_in_total() {
        let mut c = config(4, 3, 0.02);
        c.pipeline.max_epochs = 5;
        let r = match run_init(&c) {
            Ok(r) => r,
            Err(PipelineError::MaxEpochsExceeded(r)) => *r,
            Err(e) => panic!("{e}"),
        };
        for w in r.iterations.windows(2) {
            assert!(w[1].epochs > w[0].epochs);
        }
        let t = r.times;
        assert!(t.scan + t.rotation + t.correspondence + t.planning <= t.total);
        assert!(r.final_estimate.is_some());
    }

    #[test]
    fn epoch_cap_yields_partial_report() {
        let mut c = config(4, 1, 0.05);
        c.pipeline.max_epochs = 3;
        c.pipeline.tau = 0.0;
        match run_init(&c) {
            Err(PipelineError::MaxEpochsExceeded(r)) => {
                assert_eq!(r.epochs_run, 3);
                assert_eq!(r.stop_reason, StopReason::MaxEpochs);
                assert_eq!(r.iterations.len(), 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn symmetric_square_completes() {
        let mut c = config(4, 2, 0.0);
        c.world.formation = Formation::RotationSymmetric;
        let r = run_init(&c).unwrap();
        assert!(r.iterations.last().unwrap().complete);
        assert!(r.iterations.first().unwrap().numeric_rank > 5);
        assert!(r.final_estimate.unwrap().yaw_mae < 1e-3);
    }

    #[test]
    fn reports_are_reproducible() {
        let mut c = config(3, 9, 0.02);
        c.pipeline.max_epochs = 4;
        c.pipeline.record_timings = false;
        let a = serde_json::to_string(&run_init_report(&c).unwrap()).unwrap();
        let b = serde_json::to_string(&run_init_report(&c).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
