//! Deterministic swarm simulator.
//!
//! Stands in for the onboard odometry and the visual drone detector. Each scan
//! is a full rotate-in-place sweep, so every drone within `sensor_range`
//! is seen. Observations carry no identity; only the simulator keeps labels
//! (see [`ScanLabels`]) so tests can check recovered correspondences.

use std::f64::consts::{PI, TAU};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{apply_yaw, wrap_angle, Pose, Rotation2, YawVector};

const SPAWN_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("could not place {placed}/{requested} drones after {SPAWN_ATTEMPTS} attempts")]
    ArenaTooSmall { placed: usize, requested: usize },
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("trace i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Arena {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Arena {
    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }
}

/// Vertical cylinder, described by its footprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Obstacle {
    pub fn center_vec(&self) -> Vector2<f64> {
        Vector2::new(self.center[0], self.center[1])
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (p.xy() - self.center_vec()).norm() < self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Formation {
    #[default]
    Random,
    RotationSymmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_drones: usize,
    pub arena: Arena,
    pub min_spawn_separation: f64,
    pub sensor_range: f64,
    pub obs_noise_sigma: f64,
    pub odom_yaw_drift_sigma: f64,
    /// Position noise added to odometry per executed move segment.
    pub odom_position_noise_sigma: f64,
    pub seed: u64,
    pub obstacles: Vec<Obstacle>,
    pub formation: Formation,
    /// Circle radius for [`Formation::RotationSymmetric`].
    pub formation_radius: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_drones: 4,
            arena: Arena {
                min: [-5.0, -5.0, 1.0],
                max: [5.0, 5.0, 2.0],
            },
            min_spawn_separation: 1.2,
            sensor_range: 8.0,
            obs_noise_sigma: 0.0,
            odom_yaw_drift_sigma: 0.0,
            odom_position_noise_sigma: 0.0,
            seed: 0,
            obstacles: Vec::new(),
            formation: Formation::Random,
            formation_radius: 3.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: &str| Err(SimError::InvalidConfig(msg.to_string()));
        if !(2..=64).contains(&self.n_drones) {
            return bad("n_drones must be in 2..=64");
        }
        if self.obs_noise_sigma < 0.0
            || self.odom_yaw_drift_sigma < 0.0
            || self.odom_position_noise_sigma < 0.0
        {
            return bad("noise sigmas must be non-negative");
        }
        if self.min_spawn_separation <= 0.0 {
            return bad("min_spawn_separation must be positive");
        }
        if self.sensor_range <= 0.0 {
            return bad("sensor_range must be positive");
        }
        if (0..3).any(|a| self.arena.min[a] > self.arena.max[a]) {
            return bad("arena min exceeds max");
        }
        if self.formation == Formation::RotationSymmetric && self.formation_radius <= 0.0 {
            return bad("formation_radius must be positive");
        }
        Ok(())
    }
}

/// One anonymous detection: the vector from `observer` to some drone,
/// expressed in the observer's body frame at scan time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub observer: usize,
    pub epoch: usize,
    pub vector: Vector3<f64>,
    pub track: usize,
}

/// Each drone's odometry relative to its own initial frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Odometry {
    pub yaws: YawVector,
    pub positions: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub odometry: Odometry,
    /// Sorted by observer, then track.
    pub observations: Vec<Observation>,
}

impl EpochRecord {
    pub fn n_drones(&self) -> usize {
        self.odometry.yaws.len()
    }

    pub fn observations_of(&self, observer: usize) -> impl Iterator<Item = &Observation> {
        self.observations
            .iter()
            .filter(move |o| o.observer == observer)
    }

    pub fn count_for(&self, observer: usize) -> usize {
        self.observations_of(observer).count()
    }

    /// Append spurious, non-mutual detections for `observer`. Test hook: no
    /// range gate is applied.
    pub fn inject_false_positive(&self, observer: usize, vectors: &[Vector3<f64>]) -> EpochRecord {
        let mut out = self.clone();
        let first_track = self.count_for(observer);
        for (k, v) in vectors.iter().enumerate() {
            out.observations.push(Observation {
                observer,
                epoch: self.epoch,
                vector: *v,
                track: first_track + k,
            });
        }
        out.observations.sort_by_key(|o| (o.observer, o.track));
        out
    }
}

/// Hidden identity of each observation, parallel to `EpochRecord::observations`.
/// `None` marks an injected false positive.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScanLabels {
    pub identities: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub poses_t0: Vec<Pose>,
}

impl GroundTruth {
    pub fn yaws(&self) -> YawVector {
        YawVector {
            yaws: self.poses_t0.iter().map(|p| p.yaw).collect(),
        }
    }

    pub fn translations(&self) -> Vec<Vector3<f64>> {
        self.poses_t0.iter().map(|p| p.position).collect()
    }
}

#[derive(Debug, Clone)]
struct DroneState {
    initial: Pose,
    current: Pose,
    yaw_drift: f64,
    position_drift: Vector3<f64>,
}

impl DroneState {
    fn reported_yaw(&self) -> Rotation2 {
        Rotation2::new(self.current.yaw.theta - self.initial.yaw.theta + self.yaw_drift)
    }

    fn reported_position(&self) -> Vector3<f64> {
        self.initial.inverse_transform_point(&self.current.position) + self.position_drift
    }
}

/// A live swarm. Poses are kept in the arena frame; everything handed out is
/// either body-frame, own-initial-frame, or (for ground truth) drone 0's
/// initial frame.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    drones: Vec<DroneState>,
    epoch: usize,
    rng: ChaCha8Rng,
}

fn sample_yaw<R: Rng>(rng: &mut R) -> f64 {
    // (-π, π]
    PI - rng.random::<f64>() * TAU
}

fn gaussian3<R: Rng>(rng: &mut R, sigma: f64) -> Vector3<f64> {
    if sigma == 0.0 {
        return Vector3::zeros();
    }
    loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        ) * sigma;
        // truncated at 6σ so detections stay inside range + 6σ
        if v.norm() <= 6.0 * sigma {
            return v;
        }
    }
}

impl World {
    /// Place the swarm and return it with the ground-truth initial poses.
    pub fn spawn(config: WorldConfig) -> Result<(World, GroundTruth), SimError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let n = config.n_drones;
        let poses: Vec<Pose> = match config.formation {
            Formation::Random => {
                let mut placed: Vec<Pose> = Vec::with_capacity(n);
                for _ in 0..n {
                    let mut found = None;
                    for _ in 0..SPAWN_ATTEMPTS {
                        let p = Vector3::from_fn(|a, _| {
                            let (lo, hi) = (config.arena.min[a], config.arena.max[a]);
                            if hi > lo {
                                rng.random_range(lo..hi)
                            } else {
                                lo
                            }
                        });
                        let clear = placed
                            .iter()
                            .all(|q| (q.position - p).norm() >= config.min_spawn_separation)
                            && config.obstacles.iter().all(|o| !o.contains(&p));
                        if clear {
                            found = Some(p);
                            break;
                        }
                    }
                    match found {
                        Some(p) => placed.push(Pose {
                            position: p,
                            yaw: Rotation2::new(sample_yaw(&mut rng)),
                        }),
                        None => {
                            return Err(SimError::ArenaTooSmall {
                                placed: placed.len(),
                                requested: n,
                            })
                        }
                    }
                }
                placed
            }
            Formation::RotationSymmetric => {
                let c = config.arena.center();
                (0..n)
                    .map(|i| {
                        let phi = TAU * i as f64 / n as f64;
                        Pose {
                            position: c + Vector3::new(phi.cos(), phi.sin(), 0.0)
                                * config.formation_radius,
                            yaw: Rotation2::new(phi + PI / 2.0),
                        }
                    })
                    .collect()
            }
        };

        let origin = poses[0];
        let truth = GroundTruth {
            poses_t0: poses
                .iter()
                .map(|p| Pose {
                    position: origin.inverse_transform_point(&p.position),
                    yaw: Rotation2::new(p.yaw.theta - origin.yaw.theta),
                })
                .collect(),
        };
        let drones = poses
            .into_iter()
            .map(|p| DroneState {
                initial: p,
                current: p,
                yaw_drift: 0.0,
                position_drift: Vector3::zeros(),
            })
            .collect();
        Ok((
            World {
                config,
                drones,
                epoch: 0,
                rng,
            },
            truth,
        ))
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn n_drones(&self) -> usize {
        self.drones.len()
    }

    /// Index of the next scan.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// True arena-frame pose of a drone.
    pub fn true_pose(&self, drone: usize) -> Pose {
        self.drones[drone].current
    }

    pub fn odometry(&self) -> Odometry {
        Odometry {
            yaws: YawVector {
                yaws: self.drones.iter().map(DroneState::reported_yaw).collect(),
            },
            positions: self
                .drones
                .iter()
                .map(DroneState::reported_position)
                .collect(),
        }
    }

    pub fn scan_epoch(&mut self) -> EpochRecord {
        self.scan_epoch_labeled().0
    }

    /// Rotate-in-place scan of every drone, plus the hidden identities.
    pub fn scan_epoch_labeled(&mut self) -> (EpochRecord, ScanLabels) {
        if self.epoch > 0 && self.config.odom_yaw_drift_sigma > 0.0 {
            let s = self.config.odom_yaw_drift_sigma;
            for d in &mut self.drones {
                d.yaw_drift += s * self.rng.sample::<f64, _>(StandardNormal);
            }
        }
        let n = self.drones.len();
        let range = self.config.sensor_range;
        let sigma = self.config.obs_noise_sigma;
        let mut observations = Vec::new();
        let mut identities = Vec::new();
        for j in 0..n {
            let observer = self.drones[j].current;
            let mut seen: Vec<(usize, Vector3<f64>)> = Vec::new();
            for i in 0..n {
                if i == j {
                    continue;
                }
                let delta = self.drones[i].current.position - observer.position;
                if delta.norm() > range {
                    continue;
                }
                let body = apply_yaw(observer.yaw.inverse(), &delta);
                seen.push((i, body + gaussian3(&mut self.rng, sigma)));
            }
            seen.shuffle(&mut self.rng);
            for (track, (i, v)) in seen.into_iter().enumerate() {
                observations.push(Observation {
                    observer: j,
                    epoch: self.epoch,
                    vector: v,
                    track,
                });
                identities.push(Some(i));
            }
        }
        let record = EpochRecord {
            epoch: self.epoch,
            odometry: self.odometry(),
            observations,
        };
        self.epoch += 1;
        (record, ScanLabels { identities })
    }

    /// Fly `drone` through `waypoints`, given in the drone's own odometry frame.
    ///
    /// Each segment is executed as a body-frame displacement computed from the
    /// reported pose, so odometry drift shows up as real trajectory error. The
    /// drone turns to face each segment before flying it.
    pub fn move_drone(&mut self, drone: usize, waypoints: &[Vector3<f64>]) {
        let pos_sigma = self.config.odom_position_noise_sigma;
        for w in waypoints {
            let state = &self.drones[drone];
            let disp = w - state.reported_position();
            let body = apply_yaw(state.reported_yaw().inverse(), &disp);
            if body.xy().norm() < 1e-12 && body.z.abs() < 1e-12 {
                continue;
            }
            let heading = if body.xy().norm() > 1e-12 {
                body.y.atan2(body.x)
            } else {
                0.0
            };
            let noise = gaussian3(&mut self.rng, pos_sigma);
            let state = &mut self.drones[drone];
            let turned = Rotation2::new(state.current.yaw.theta + heading);
            // body displacement in the turned frame points straight ahead
            let ahead = Vector3::new(body.xy().norm(), 0.0, body.z);
            state.current.position += apply_yaw(turned, &ahead);
            state.current.yaw = turned;
            state.position_drift += Vector3::new(noise.x, noise.y, 0.0);
        }
    }

    /// Obstacles in a drone's own odometry frame, limited to sensor range.
    pub fn local_obstacles(&self, drone: usize) -> Vec<Obstacle> {
        let state = &self.drones[drone];
        // reported own frame ↔ arena: arena = current + R(yaw_true) R(-yaw_rep) (own - own_rep)
        let offset = wrap_angle(state.current.yaw.theta - state.reported_yaw().theta);
        let range = self.config.sensor_range;
        self.config
            .obstacles
            .iter()
            .filter_map(|o| {
                let rel = Vector3::new(o.center[0], o.center[1], state.current.position.z)
                    - state.current.position;
                if rel.xy().norm() - o.radius > range {
                    return None;
                }
                let own = state.reported_position() + apply_yaw(Rotation2::new(-offset), &rel);
                Some(Obstacle {
                    center: [own.x, own.y],
                    radius: o.radius,
                })
            })
            .collect()
    }

    /// Ground-truth yaw of each drone's current body frame relative to its
    /// initial frame (no drift).
    pub fn true_relative_yaws(&self) -> YawVector {
        YawVector {
            yaws: self
                .drones
                .iter()
                .map(|d| Rotation2::new(d.current.yaw.theta - d.initial.yaw.theta))
                .collect(),
        }
    }
}

/// Dump records as JSON Lines, one record per line.
pub fn write_trace(path: &Path, records: &[EpochRecord]) -> Result<(), SimError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| SimError::Parse {
            line: r.epoch,
            source: e,
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<EpochRecord>, SimError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| SimError::Parse {
            line: idx + 1,
            source: e,
        })?;
        out.push(rec);
    }
    Ok(out)
}
