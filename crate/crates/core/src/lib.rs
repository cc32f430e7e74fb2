//! Coordinate initialization for drone swarms from anonymous, mutual
//! bearing-and-range observations.
//!
//! Initial yaws are recovered by a semidefinite relaxation of rotation
//! synchronization, translations by Hungarian matching of mutual
//! observations. A deterministic simulator and an active planner close the
//! observe–solve–move loop.

pub mod baselines;
pub mod bench;
pub mod config;
pub mod correspondence;
pub mod geometry;
pub mod matrix_serde;
pub mod pipeline;
pub mod planner;
pub mod sdp_rotation;
pub mod simulator;

pub use geometry::{Pose, Rotation2, YawVector};
pub use sdp_rotation::{build_q, solve_sdp, QMatrix, SdpSolution};
pub use simulator::{EpochRecord, GroundTruth, Observation, World, WorldConfig};
