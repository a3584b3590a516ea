//! The loop driver.
//!
//! Each loop predicts on the pool images, sends new predictions to the crowd,
//! applies the crowd's decisions and retrains, all through label-store
//! events. Reports are computed from the event log alone, so replaying a
//! log reproduces them exactly.

mod metrics;
mod report;
mod sim;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::crowdgate::{CrowdConfig, CrowdError};
use crate::detector::{DetectError, SimDetectorConfig, WorldConfig};
use crate::labelstore::StoreError;
use crate::rng;
use crate::trainer::{TrainConfig, TrainError};
use crate::workersim::{PopulationConfig, WorkerError};

pub use metrics::{
    average_precision, has_converged, matched_truths, precision_by_class, ApReport, EvalDetection,
    EvalTruth,
};
pub use report::{
    render_table, replay_reports, write_report_csv, write_summary_csv, CountDelta, HitStats,
    LoopReport, ReportBuilder,
};
pub use sim::{precision_ablation, AblationPair, RunManifest, Simulation};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Crowd(#[from] CrowdError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Worker(#[from] WorkerError),
    #[error("invalid run config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = OrchestratorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Train an initial model on fully labeled seed images, then iterate.
    #[default]
    FromSeed,
    /// Start from point annotations: the crowd tightens boxes seeded at the
    /// dots and the first training pass uses those half-labeled images.
    LegacyDots,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub mode: RunMode,
    pub max_loops: u32,
    pub epsilon: f64,
    pub patience: usize,
    /// Predictions scoring below this are not sent to the crowd.
    pub publish_threshold: f64,
    /// A prediction overlapping an existing annotation at this IoU is dropped.
    pub dedup_iou: f64,
    pub eval_iou: f64,
    /// Feed crowd-confirmed background boxes to training.
    pub background_training: bool,
    pub train_images_per_loop: usize,
    /// Upper bound on worker rounds in one crowd phase.
    pub max_crowd_rounds: usize,
    /// Fraction of pool objects left without a dot.
    pub missing_dot_fraction: f64,
    /// Dot placement noise as a fraction of object width/height.
    pub dot_jitter: f64,
    pub dot_half_extent: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::FromSeed,
            max_loops: 10,
            epsilon: 0.01,
            patience: 1,
            publish_threshold: 0.5,
            dedup_iou: 0.5,
            eval_iou: 0.5,
            background_training: true,
            train_images_per_loop: 6,
            max_crowd_rounds: 1000,
            missing_dot_fraction: 0.05,
            dot_jitter: 0.1,
            dot_half_extent: crate::geometry::DEFAULT_HALF_EXTENT,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(OrchestratorError::Config(m.to_string()));
        if self.max_loops == 0 {
            return bad("max_loops must be at least 1");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        for (name, v) in [
            ("publish_threshold", self.publish_threshold),
            ("dedup_iou", self.dedup_iou),
            ("eval_iou", self.eval_iou),
            ("missing_dot_fraction", self.missing_dot_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(OrchestratorError::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.train_images_per_loop == 0 {
            return bad("train_images_per_loop must be at least 1");
        }
        if !(self.dot_jitter >= 0.0) || !(self.dot_half_extent > 0.0) {
            return bad("dot_jitter must be >= 0 and dot_half_extent > 0");
        }
        Ok(())
    }
}

/// Everything a simulated run depends on.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub detector: SimDetectorConfig,
    pub trainer: TrainConfig,
    pub crowd: CrowdConfig,
    pub population: PopulationConfig,
    #[serde(rename = "loop")]
    pub run: LoopConfig,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.trainer.validate()?;
        self.run.validate()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Per-component seeds derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub world: u64,
    pub detector: u64,
    pub population: u64,
    pub crowd: u64,
    pub answers: u64,
    pub train: u64,
    pub dots: u64,
}

impl Seeds {
    pub fn derive(seed: u64) -> Self {
        Self {
            world: rng::derive(seed, "world"),
            detector: rng::derive(seed, "detector"),
            population: rng::derive(seed, "population"),
            crowd: rng::derive(seed, "crowd"),
            answers: rng::derive(seed, "answers"),
            train: rng::derive(seed, "train"),
            dots: rng::derive(seed, "dots"),
        }
    }
}
