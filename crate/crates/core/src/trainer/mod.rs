//! Training on half-labeled images.
//!
//! Anchors are matched against verified objects and crowd-confirmed
//! background boxes. Anchors the model already scores as confident objects
//! but that no label explains are ignored rather than used as negatives, and
//! confirmed background boxes are always sampled as negatives first.

mod anchors;
mod augment;
mod loss;
mod model;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoxDelta, GeometryError};

pub use anchors::{generate_anchors, match_and_sample, AnchorConfig};
pub use augment::{augment, sample_augmentation, AugmentConfig, AugmentParams, ImageMeta};
pub use loss::{bce, localization_loss, smooth_l1, total_loss, LossBreakdown, BCE_EPSILON};
pub use model::{
    finite_difference_gradient, loss_gradient, loss_for_params, GradientReport, LinearLogistic,
    ScoringModel,
};
pub use train::{train_epochs, write_loss_trace, FeatureProvider, TrainImage, TrainOutcome};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{anchors} anchors but {other} {what}")]
    LengthMismatch {
        anchors: usize,
        other: usize,
        what: &'static str,
    },
    #[error("minibatch has no loss-bearing samples")]
    EmptyBatch,
    #[error("gradient component {index} is not finite")]
    NonFiniteGradient { index: usize },
    #[error("loss diverged at epoch {epoch}: {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("no labeled objects to train on")]
    NoLabels,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

/// What to do when a minibatch contains only ignored anchors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyBatchPolicy {
    #[default]
    Error,
    ZeroWithWarning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Unlabeled anchors scored above this probability are ignored.
    pub ignore_threshold: f64,
    pub ignore_rule: bool,
    /// Minibatch size; also the loss normalizer.
    pub minibatch_size: usize,
    pub positive_fraction: f64,
    pub lambda: f64,
    pub match_iou_pos: f64,
    pub match_iou_neg: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub divergence_limit: f64,
    pub empty_batch: EmptyBatchPolicy,
    pub anchors: AnchorConfig,
    pub augmentation: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ignore_threshold: 0.9,
            ignore_rule: true,
            minibatch_size: 256,
            positive_fraction: 0.5,
            lambda: 1.0,
            match_iou_pos: 0.7,
            match_iou_neg: 0.3,
            learning_rate: 0.5,
            epochs: 20,
            divergence_limit: 1e6,
            empty_batch: EmptyBatchPolicy::Error,
            anchors: AnchorConfig::default(),
            augmentation: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(TrainError::InvalidConfig(format!("{name} must lie in (0, 1), got {v}")))
            }
        };
        unit("ignore_threshold", self.ignore_threshold)?;
        unit("match_iou_pos", self.match_iou_pos)?;
        unit("match_iou_neg", self.match_iou_neg)?;
        unit("positive_fraction", self.positive_fraction)?;
        if self.match_iou_neg > self.match_iou_pos {
            return Err(TrainError::InvalidConfig(
                "match_iou_neg must not exceed match_iou_pos".into(),
            ));
        }
        if self.minibatch_size == 0 {
            return Err(TrainError::InvalidConfig("minibatch_size must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(TrainError::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig("learning_rate must be positive".into()));
        }
        self.anchors.validate()?;
        self.augmentation.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnchorRole {
    /// Matched to a verified object.
    PositiveI,
    /// Matched to a crowd-confirmed background box.
    LabeledBackgroundJ,
    /// A randomly drawn negative with no label nearby.
    NegativeK,
    /// Confident but unexplained by any label; excluded from the loss.
    Ignored,
    Unused,
}

impl AnchorRole {
    /// The objectness target, for roles that enter the loss.
    pub fn p_star(self) -> Option<f64> {
        match self {
            AnchorRole::PositiveI => Some(1.0),
            AnchorRole::LabeledBackgroundJ | AnchorRole::NegativeK => Some(0.0),
            AnchorRole::Ignored | AnchorRole::Unused => None,
        }
    }

    pub fn in_loss(self) -> bool {
        self.p_star().is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSample {
    /// Index into the anchor list this sample was drawn from.
    pub anchor: usize,
    pub role: AnchorRole,
    pub p: f64,
    pub t: Option<BoxDelta>,
    pub t_star: Option<BoxDelta>,
}

impl AnchorSample {
    pub fn new(anchor: usize, role: AnchorRole, p: f64) -> Self {
        Self {
            anchor,
            role,
            p,
            t: None,
            t_star: None,
        }
    }

    pub fn p_star(&self) -> Option<f64> {
        self.role.p_star()
    }
}
