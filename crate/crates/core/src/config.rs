//! Scenario configuration file: `{world, planner, pipeline, benchmark}`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::{PlannerError, PlannerParams};
use crate::simulator::{SimError, WorldConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    World(#[from] SimError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error("invalid pipeline settings: {0}")]
    Pipeline(String),
    #[error("invalid benchmark settings: {0}")]
    Benchmark(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    /// Epochs to accumulate before the first solve.
    pub min_num_observations: usize,
    pub max_epochs: usize,
    /// Stop threshold in m² per epoch.
    pub tau: f64,
    pub rank_tol: f64,
    /// Spurious detections injected per epoch (robustness experiments).
    pub false_positives_per_epoch: usize,
    /// Wall-clock stage times in the report. Off gives byte-reproducible
    /// output.
    pub record_timings: bool,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            min_num_observations: 2,
            max_epochs: 30,
            tau: 1e-3,
            rank_tol: crate::sdp_rotation::DEFAULT_RANK_TOL,
            false_positives_per_epoch: 0,
            record_timings: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkParams {
    pub n_drones: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub trials: usize,
    /// Observation epochs per trial; 0 means `2·N`.
    pub epochs: usize,
    /// Largest per-axis displacement between epochs, meters.
    pub motion: f64,
    pub seed: u64,
    pub record_timings: bool,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        Self {
            n_drones: (2..=8).collect(),
            sigmas: vec![0.0, 0.02, 0.05, 0.10, 0.20],
            trials: 20,
            epochs: 0,
            motion: 1.5,
            seed: 0,
            record_timings: true,
        }
    }
}

impl BenchmarkParams {
    pub fn epochs_for(&self, n: usize) -> usize {
        if self.epochs == 0 {
            2 * n
        } else {
            self.epochs
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub world: WorldConfig,
    pub planner: PlannerParams,
    pub pipeline: PipelineParams,
    pub benchmark: BenchmarkParams,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let config: Config = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.world.validate()?;
        self.planner.validate()?;
        let p = &self.pipeline;
        if p.min_num_observations == 0 || p.max_epochs == 0 {
            return Err(ConfigError::Pipeline(
                "min_num_observations and max_epochs must be positive".into(),
            ));
        }
        if !(p.tau >= 0.0 && p.rank_tol > 0.0) {
            return Err(ConfigError::Pipeline("tau must be ≥ 0 and rank_tol > 0".into()));
        }
        let b = &self.benchmark;
        if b.n_drones.iter().any(|&n| !(2..=64).contains(&n)) {
            return Err(ConfigError::Benchmark("n_drones must lie in 2..=64".into()));
        }
        if b.sigmas.iter().any(|&s| s.is_nan() || s < 0.0) {
            return Err(ConfigError::Benchmark("sigmas must be ≥ 0".into()));
        }
        if b.motion.is_nan() || b.motion < 0.0 {
            return Err(ConfigError::Benchmark("motion must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_fill_defaults() {
        let c: Config = serde_json::from_str(r#"{"world": {"n_drones": 6}, "pipeline": {"tau": 0.01}}"#).unwrap();
        assert_eq!(c.world.n_drones, 6);
        assert_eq!(c.pipeline.tau, 0.01);
        assert_eq!(c.pipeline.max_epochs, 30);
        assert_eq!(c.planner, PlannerParams::default());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn round_trips_and_rejects_bad_values() {
        let c = Config::default();
        let back: Config = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let mut bad = c.clone();
        bad.benchmark.n_drones = vec![1];
        assert!(bad.validate().is_err());
        let mut bad = c;
        bad.pipeline.max_epochs = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_epochs_scale_with_swarm() {
        let b = BenchmarkParams::default();
        assert_eq!(b.epochs_for(4), 8);
        let fixed = BenchmarkParams { epochs: 5, ..b };
        assert_eq!(fixed.epochs_for(4), 5);
    }
}
