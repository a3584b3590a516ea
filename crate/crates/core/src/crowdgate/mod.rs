//! The crowd-task engine.
//!
//! Predictions are grouped into HITs of ten subtasks whose last subtask is a
//! hidden gold box with known truth. A worker's whole HIT is accepted only if
//! their box for the gold subtask overlaps the truth with IoU strictly above
//! the approval threshold. Accepted answers then go through the consensus
//! rule: an object's class is fixed once two consecutive votes agree, with
//! the model's prediction counting as the first vote.

mod approval;
mod assemble;
mod consensus;
mod pool;
mod session;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::labelstore::{ClassLabel, StoreError};

pub use approval::{auto_approve, random_box_iou_bound, ApprovalOutcome, ForwardedAnswer};
pub use assemble::{assemble_hits, viewport_for};
pub use consensus::{
    consensus_step, enumerate_consensus, reference_outcome, ConsensusDecision, ConsensusState,
    SequenceOutcome,
};
pub use pool::{HitPool, WorkerRecord};
pub use session::{CrowdSession, SubmitReport};

#[derive(Debug, Error)]
pub enum CrowdError {
    #[error("gold pool is empty; auto-approval is impossible")]
    NoGold,
    #[error("expected {expected} answers, got {found}")]
    BadAnswerCount { expected: usize, found: usize },
    #[error("unknown hit {0}")]
    UnknownHit(String),
    #[error("hit {hit_id} is not leased to {worker_id}")]
    StaleLease { hit_id: String, worker_id: String },
    #[error("approval threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("malformed hit: {0}")]
    MalformedHit(String),
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("answer for subtask {index} invalid: {reason}")]
    BadAnswer { index: usize, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = CrowdError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrowdConfig {
    /// Subtasks per HIT, gold included.
    pub hit_size: usize,
    pub approval_threshold: f64,
    /// Additionally require the gold answer's class to match.
    pub require_gold_class: bool,
    pub lease_duration_secs: u64,
    /// Consecutive HIT rejections after which a worker gets no more leases.
    pub block_after_rejections: u32,
    /// Publications after which a still-disputed annotation is rejected.
    pub max_publish: u32,
    /// Viewport side as a multiple of the proposed box side.
    pub viewport_scale: f64,
    /// Per-edge jitter, as a fraction of box size, applied to gold proposals.
    pub gold_proposal_jitter: f64,
    /// Whether crowd-approved boxes may serve as gold (seed boxes always do).
    pub gold_from_approved: bool,
}

impl Default for CrowdConfig {
    fn default() -> Self {
        Self {
            hit_size: 10,
            approval_threshold: 0.8,
            require_gold_class: false,
            lease_duration_secs: 600,
            block_after_rejections: 3,
            max_publish: 6,
            viewport_scale: 2.0,
            gold_proposal_jitter: 0.15,
            gold_from_approved: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtaskKind {
    /// A prediction awaiting review.
    Real,
    /// Padding drawn from the gold pool to fill a short final HIT; never gates
    /// approval and never receives consensus updates.
    Filler,
    /// The gating gold subtask, always last.
    Gold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTask {
    pub ann_id: String,
    pub image_id: String,
    pub crop_viewport: BBox,
    pub proposed_box: BBox,
    pub proposed_class: ClassLabel,
    pub kind: SubtaskKind,
    /// Ground truth for gold and filler subtasks.
    pub truth: Option<(ClassLabel, BBox)>,
}

impl SubTask {
    pub fn is_gold(&self) -> bool {
        self.kind == SubtaskKind::Gold
    }

    pub fn is_real(&self) -> bool {
        self.kind == SubtaskKind::Real
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitStatus {
    Open,
    Leased,
    Submitted,
    Approved,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub worker_id: String,
    pub expires_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub hit_id: String,
    subtasks: Vec<SubTask>,
    pub lease: Option<Lease>,
    pub status: HitStatus,
}

impl Hit {
    /// Checks that the last subtask, and only it, is the gating gold.
    pub fn new(hit_id: impl Into<String>, subtasks: Vec<SubTask>) -> Result<Self> {
        let hit_id = hit_id.into();
        let golds = subtasks.iter().filter(|s| s.is_gold()).count();
        if golds != 1 || !subtasks.last().is_some_and(SubTask::is_gold) {
            return Err(CrowdError::MalformedHit(format!(
                "{hit_id}: exactly one gold subtask, in last position, is required"
            )));
        }
        if subtasks
            .iter()
            .any(|s| !s.is_real() && s.truth.is_none())
        {
            return Err(CrowdError::MalformedHit(format!(
                "{hit_id}: gold subtasks need ground truth"
            )));
        }
        Ok(Self {
            hit_id,
            subtasks,
            lease: None,
            status: HitStatus::Open,
        })
    }

    pub fn subtasks(&self) -> &[SubTask] {
        &self.subtasks
    }

    pub fn gold_position(&self) -> usize {
        self.subtasks.len() - 1
    }

    pub fn gold(&self) -> &SubTask {
        &self.subtasks[self.gold_position()]
    }

    pub fn real_subtasks(&self) -> impl Iterator<Item = (usize, &SubTask)> {
        self.subtasks.iter().enumerate().filter(|(_, s)| s.is_real())
    }

    /// True while the HIT is free to be leased at time `now`.
    pub fn is_available(&self, now: u64) -> bool {
        match self.status {
            HitStatus::Open => true,
            HitStatus::Leased => self.lease.as_ref().is_some_and(|l| l.expires_at <= now),
            _ => false,
        }
    }
}

/// One subtask's answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubtaskAnswer {
    pub adjusted_box: BBox,
    pub selected_class: ClassLabel,
}

/// A worker's answers for every subtask of a HIT, in subtask order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerAnswer {
    pub subtasks: Vec<SubtaskAnswer>,
}

/// What a worker sees of a HIT. Carries no gold flag, truth or annotation id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitView {
    pub hit_id: String,
    pub lease_expires_at: u64,
    pub subtasks: Vec<SubtaskView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskView {
    pub index: usize,
    pub image_id: String,
    pub image_uri: String,
    pub crop_viewport: BBox,
    pub proposed_box: BBox,
    pub proposed_class: ClassLabel,
}
