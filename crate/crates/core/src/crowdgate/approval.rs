use super::{CrowdConfig, CrowdError, Hit, Result, SubtaskAnswer};
use crate::geometry::iou;

/// An accepted answer for a real subtask, ready for the consensus step.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardedAnswer {
    pub index: usize,
    pub ann_id: String,
    pub answer: SubtaskAnswer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApprovalOutcome {
    pub approved: bool,
    pub gold_iou: f64,
    pub gold_class_matched: bool,
    /// Real-subtask answers of an approved HIT; empty on rejection.
    pub forwarded: Vec<ForwardedAnswer>,
    /// Annotation ids of the real subtasks when the HIT is rejected.
    pub returned: Vec<String>,
}

impl ApprovalOutcome {
    pub fn reason(&self, threshold: f64) -> String {
        if self.approved {
            format!("gold IoU {:.4} > {threshold}", self.gold_iou)
        } else if self.gold_iou <= threshold {
            format!("gold IoU {:.4} <= {threshold}", self.gold_iou)
        } else {
            "gold class mismatch".to_string()
        }
    }
}

/// Gates a whole HIT on its gold subtask. The HIT passes iff the IoU between
/// the worker's gold box and the gold truth is strictly greater than the
/// threshold (and, if configured, the gold class matches).
pub fn auto_approve(hit: &Hit, answer: &[SubtaskAnswer], cfg: &CrowdConfig) -> Result<ApprovalOutcome> {
    let t = cfg.approval_threshold;
    if !(t > 0.0 && t < 1.0) {
        return Err(CrowdError::BadThreshold(t));
    }
    if answer.len() != hit.subtasks().len() {
        return Err(CrowdError::BadAnswerCount {
            expected: hit.subtasks().len(),
            found: answer.len(),
        });
    }
    let gold = hit.gold();
    let (truth_class, truth_box) = gold
        .truth
        .as_ref()
        .ok_or_else(|| CrowdError::MalformedHit(format!("{}: gold without truth", hit.hit_id)))?;
    let gold_answer = &answer[hit.gold_position()];
    let gold_iou = iou(&gold_answer.adjusted_box, truth_box);
    let gold_class_matched = gold_answer.selected_class == *truth_class;
    let approved = gold_iou > t && (gold_class_matched || !cfg.require_gold_class);

    let (forwarded, returned) = if approved {
        let fwd = hit
            .real_subtasks()
            .map(|(index, s)| ForwardedAnswer {
                index,
                ann_id: s.ann_id.clone(),
                answer: answer[index].clone(),
            })
            .collect();
        (fwd, Vec::new())
    } else {
        (Vec::new(), hit.real_subtasks().map(|(_, s)| s.ann_id.clone()).collect())
    };
    Ok(ApprovalOutcome {
        approved,
        gold_iou,
        gold_class_matched,
        forwarded,
        returned,
    })
}

/// Upper bound on the probability that a box drawn uniformly inside a
/// viewport reaches IoU at least `threshold` with a fixed target box.
///
/// `rx` and `ry` are the target's width and height as fractions of the
/// viewport's. The 2-D IoU never exceeds the IoU of either axis projection,
/// and along one axis a sorted uniform pair reaches IoU `t` only inside a
/// diamond of half-diagonal `(1 - t) / t * w`, which bounds the per-axis
/// probability by `4 ((1 - t) / t)^2 (w / V)^2`.
pub fn random_box_iou_bound(threshold: f64, rx: f64, ry: f64) -> f64 {
    let k = (1.0 - threshold) / threshold;
    let axis = |r: f64| (4.0 * k * k * r * r).min(1.0);
    axis(rx) * axis(ry)
}
