use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Annotation, ClassLabel, ImageRecord, ReviewEvent};
use crate::geometry::BBox;

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggedEvent {
    pub seq: u64,
    pub event: StoreEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum StoreEvent {
    CatalogDefined {
        classes: Vec<String>,
    },
    ImageAdded {
        image: ImageRecord,
    },
    AnnotationAdded {
        annotation: Annotation,
    },
    Published {
        ann_id: String,
        hit_id: String,
    },
    ReviewApplied {
        ann_id: String,
        outcome: ReviewOutcome,
        review: ReviewEvent,
    },
    /// Audit record of one HIT submission; does not change annotation state.
    HitAudited {
        audit: HitAudit,
    },
    /// Marks the end of one labeling loop together with what the detector was
    /// retrained on.
    LoopCommitted {
        loop_index: u32,
        summary: TrainingSummary,
    },
}

/// The decision the crowd reached for one annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReviewOutcome {
    Finalize {
        class_label: ClassLabel,
        #[serde(rename = "box")]
        bbox: BBox,
    },
    Republish {
        class_label: ClassLabel,
        #[serde(rename = "box")]
        bbox: BBox,
    },
    Reject {
        reason: String,
    },
}

impl ReviewOutcome {
    pub(crate) fn class_label(&self) -> Option<&ClassLabel> {
        match self {
            ReviewOutcome::Finalize { class_label, .. }
            | ReviewOutcome::Republish { class_label, .. } => Some(class_label),
            ReviewOutcome::Reject { .. } => None,
        }
    }

    pub(crate) fn action(&self) -> &'static str {
        match self {
            ReviewOutcome::Finalize { .. } => "finalize",
            ReviewOutcome::Republish { .. } => "republish",
            ReviewOutcome::Reject { .. } => "reject",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HitAudit {
    pub hit_id: String,
    pub worker_id: String,
    pub gold_ann_id: Option<String>,
    pub gold_iou: Option<f64>,
    pub approved: bool,
    pub reason: String,
    pub timestamp: u64,
}

/// What a detector retraining pass consumed: verified object counts per class
/// and the number of background labels fed in as forced negatives.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSummary {
    pub labeled_per_class: BTreeMap<String, u64>,
    pub background_labels: u64,
    pub final_loss: Option<f64>,
}
