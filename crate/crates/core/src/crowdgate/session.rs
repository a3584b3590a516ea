use serde::{Deserialize, Serialize};

use super::consensus::{consensus_step, ConsensusDecision, ConsensusState};
use super::{
    assemble_hits, CrowdConfig, CrowdError, Hit, HitPool, HitStatus, HitView, Result,
    SubtaskAnswer, SubtaskView,
};
use crate::labelstore::{
    AnnotationState, HitAudit, LabelStore, ReviewEvent, ReviewOutcome, StoreError, StoreEvent,
};
use crate::rng;

/// Result of one HIT submission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitReport {
    pub hit_id: String,
    pub status: HitStatus,
    /// True when the submission was refused because the lease was not held.
    pub stale: bool,
    pub gold_iou: Option<f64>,
    pub reason: String,
    /// Annotation states after the consensus step, for approved HITs.
    pub outcomes: Vec<(String, AnnotationState)>,
}

/// Couples the HIT pool with a label store. Both the HTTP service and the
/// simulated crowd drive the crowd only through `lease` and `submit`, so the
/// two paths write identical events.
#[derive(Debug, Clone)]
pub struct CrowdSession {
    pool: HitPool,
    seed: u64,
}

impl CrowdSession {
    pub fn new(cfg: CrowdConfig, seed: u64) -> Self {
        Self {
            pool: HitPool::new(cfg),
            seed,
        }
    }

    pub fn pool(&self) -> &HitPool {
        &self.pool
    }

    pub fn config(&self) -> &CrowdConfig {
        self.pool.config()
    }

    /// Assembles and publishes HITs for every annotation awaiting review that
    /// no live HIT carries. Returns the number of HITs created.
    pub fn publish_pending(&self, store: &mut LabelStore) -> Result<usize> {
        let cfg = self.pool.config();
        let data = store.dataset();
        let pending: Vec<_> = data
            .annotations_in(&[
                AnnotationState::Predicted,
                AnnotationState::Republished,
                AnnotationState::PendingReview,
            ])
            .filter(|a| !self.pool.is_in_flight(&a.ann_id))
            .collect();
        if pending.is_empty() {
            return Ok(0);
        }
        let mut gold_states = vec![AnnotationState::Seed];
        if cfg.gold_from_approved {
            gold_states.push(AnnotationState::Approved);
        }
        let gold: Vec<_> = data.annotations_in(&gold_states).collect();
        let extent = |id: &str| data.image(id).map(|i| i.extent());
        let seed = rng::derive(self.seed, format!("publish-{}", store.last_seq()));
        let hits = self
            .pool
            .with_id_counter(|next| assemble_hits(&pending, &gold, &extent, cfg, seed, next))?;
        for hit in &hits {
            for (_, s) in hit.real_subtasks() {
                store.publish(&s.ann_id, &hit.hit_id)?;
            }
        }
        let n = hits.len();
        self.pool.insert(hits);
        Ok(n)
    }

    /// Leases a HIT to `worker_id`, assembling new HITs from waiting
    /// annotations when none is available.
    pub fn lease(&self, store: &mut LabelStore, worker_id: &str, now: u64) -> Result<Option<HitView>> {
        if self.pool.is_blocked(worker_id) {
            return Ok(None);
        }
        let hit = match self.pool.lease(worker_id, now) {
            Some(h) => Some(h),
            None => {
                if self.publish_pending(store)? > 0 {
                    self.pool.lease(worker_id, now)
                } else {
                    None
                }
            }
        };
        Ok(hit.map(|h| view_of(&h, store)))
    }

    /// Handles one worker submission end to end: lease check, gold gate,
    /// audit record and the consensus step for every forwarded answer.
    pub fn submit(
        &self,
        store: &mut LabelStore,
        hit_id: &str,
        worker_id: &str,
        answer: &[SubtaskAnswer],
        now: u64,
    ) -> Result<SubmitReport> {
        let hit = match self.pool.check_lease(hit_id, worker_id, now) {
            Ok(h) => h,
            Err(e @ (CrowdError::StaleLease { .. } | CrowdError::UnknownHit(_))) => {
                let reason = e.to_string();
                store.commit(StoreEvent::HitAudited {
                    audit: HitAudit {
                        hit_id: hit_id.to_string(),
                        worker_id: worker_id.to_string(),
                        gold_ann_id: None,
                        gold_iou: None,
                        approved: false,
                        reason: reason.clone(),
                        timestamp: now,
                    },
                })?;
                return Ok(SubmitReport {
                    hit_id: hit_id.to_string(),
                    status: HitStatus::Rejected,
                    stale: true,
                    gold_iou: None,
                    reason,
                    outcomes: Vec::new(),
                });
            }
            Err(e) => return Err(e),
        };
        let answer = self.validate(store, &hit, answer)?;

        let cfg = self.pool.config();
        let outcome = self.pool.submit(hit_id, worker_id, &answer, now)?;
        let reason = outcome.reason(cfg.approval_threshold);
        store.commit(StoreEvent::HitAudited {
            audit: HitAudit {
                hit_id: hit_id.to_string(),
                worker_id: worker_id.to_string(),
                gold_ann_id: Some(hit.gold().ann_id.clone()),
                gold_iou: Some(outcome.gold_iou),
                approved: outcome.approved,
                reason: reason.clone(),
                timestamp: now,
            },
        })?;

        let mut outcomes = Vec::with_capacity(outcome.forwarded.len());
        for fwd in &outcome.forwarded {
            let ann = store
                .dataset()
                .annotation(&fwd.ann_id)
                .ok_or_else(|| StoreError::UnknownAnnotation(fwd.ann_id.clone()))?;
            let state = ConsensusState {
                current_class: ann.class_label.clone(),
                agreement_needed: true,
                publish_count: ann.publish_count,
            };
            let review = ReviewEvent {
                worker_id: worker_id.to_string(),
                submitted_box: fwd.answer.adjusted_box,
                selected_class: fwd.answer.selected_class.clone(),
                gold_passed: Some(true),
                timestamp: now,
            };
            let decision = match consensus_step(
                &state,
                &fwd.answer.selected_class,
                fwd.answer.adjusted_box,
            ) {
                ConsensusDecision::Finalize { class_label, bbox } => ReviewOutcome::Finalize {
                    class_label,
                    bbox: bbox.unwrap_or(ann.bbox),
                },
                ConsensusDecision::Republish { state: next, bbox } => {
                    if next.publish_count > cfg.max_publish {
                        ReviewOutcome::Reject {
                            reason: format!("no agreement after {} publications", state.publish_count),
                        }
                    } else {
                        ReviewOutcome::Republish {
                            class_label: next.current_class,
                            bbox,
                        }
                    }
                }
            };
            let after = store.apply_review_outcome(&fwd.ann_id, decision, review)?;
            outcomes.push((fwd.ann_id.clone(), after.state));
        }
        Ok(SubmitReport {
            hit_id: hit_id.to_string(),
            status: if outcome.approved {
                HitStatus::Approved
            } else {
                HitStatus::Rejected
            },
            stale: false,
            gold_iou: Some(outcome.gold_iou),
            reason,
            outcomes,
        })
    }

    /// Checks the answer count and class names, and clips every answer box to
    /// its image.
    fn validate(&self, store: &LabelStore, hit: &Hit, answer: &[SubtaskAnswer]) -> Result<Vec<SubtaskAnswer>> {
        if answer.len() != hit.subtasks().len() {
            return Err(CrowdError::BadAnswerCount {
                expected: hit.subtasks().len(),
                found: answer.len(),
            });
        }
        let data = store.dataset();
        hit.subtasks()
            .iter()
            .zip(answer)
            .enumerate()
            .map(|(index, (s, a))| {
                if !data.catalog.knows(&a.selected_class) {
                    return Err(CrowdError::BadAnswer {
                        index,
                        reason: format!("unknown class {}", a.selected_class),
                    });
                }
                let (w, h) = data
                    .image(&s.image_id)
                    .ok_or_else(|| CrowdError::UnknownImage(s.image_id.clone()))?
                    .extent();
                let adjusted_box = a.adjusted_box.clip_to(w, h).map_err(|e| CrowdError::BadAnswer {
                    index,
                    reason: e.to_string(),
                })?;
                Ok(SubtaskAnswer {
                    adjusted_box,
                    selected_class: a.selected_class.clone(),
                })
            })
            .collect()
    }
}

fn view_of(hit: &Hit, store: &LabelStore) -> HitView {
    let data = store.dataset();
    HitView {
        hit_id: hit.hit_id.clone(),
        lease_expires_at: hit.lease.as_ref().map_or(0, |l| l.expires_at),
        subtasks: hit
            .subtasks()
            .iter()
            .enumerate()
            .map(|(index, s)| SubtaskView {
                index,
                image_id: s.image_id.clone(),
                image_uri: data
                    .image(&s.image_id)
                    .map(|i| i.uri.clone())
                    .unwrap_or_default(),
                crop_viewport: s.crop_viewport,
                proposed_box: s.proposed_box,
                proposed_class: s.proposed_class.clone(),
            })
            .collect(),
    }
}
