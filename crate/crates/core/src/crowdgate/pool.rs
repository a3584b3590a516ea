use std::collections::{BTreeMap, BTreeSet};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::approval::{auto_approve, ApprovalOutcome};
use super::{CrowdConfig, CrowdError, Hit, HitStatus, Lease, Result, SubtaskAnswer};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerRecord {
    pub approved: u64,
    pub rejected: u64,
    pub consecutive_rejections: u32,
    pub blocked: bool,
}

#[derive(Debug, Clone, Default)]
struct Inner {
    hits: BTreeMap<String, Hit>,
    workers: BTreeMap<String, WorkerRecord>,
    /// Workers whose accepted answer already counted for an annotation.
    reviewed_by: BTreeMap<String, BTreeSet<String>>,
    /// Annotations carried by an open or leased HIT.
    in_flight: BTreeSet<String>,
    next_id: u64,
}

/// The set of live HITs. All operations take one lock, so a HIT is leased to
/// at most one worker at a time.
#[derive(Debug)]
pub struct HitPool {
    cfg: CrowdConfig,
    inner: Mutex<Inner>,
}

impl Clone for HitPool {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            inner: Mutex::new(self.inner.lock().clone()),
        }
    }
}

impl HitPool {
    pub fn new(cfg: CrowdConfig) -> Self {
        Self {
            cfg,
            inner: Mutex::new(Inner::default()),
        }
    }

    pub fn config(&self) -> &CrowdConfig {
        &self.cfg
    }

    /// Runs `f` with the pool's hit-id counter, for assembling new HITs.
    pub fn with_id_counter<T>(&self, f: impl FnOnce(&mut u64) -> T) -> T {
        f(&mut self.inner.lock().next_id)
    }

    pub fn insert(&self, hits: Vec<Hit>) {
        let mut inner = self.inner.lock();
        for hit in hits {
            for (_, s) in hit.real_subtasks() {
                inner.in_flight.insert(s.ann_id.clone());
            }
            inner.hits.insert(hit.hit_id.clone(), hit);
        }
    }

    pub fn is_in_flight(&self, ann_id: &str) -> bool {
        self.inner.lock().in_flight.contains(ann_id)
    }

    pub fn get(&self, hit_id: &str) -> Option<Hit> {
        self.inner.lock().hits.get(hit_id).cloned()
    }

    pub fn worker(&self, worker_id: &str) -> WorkerRecord {
        self.inner
            .lock()
            .workers
            .get(worker_id)
            .cloned()
            .unwrap_or_default()
    }

    pub fn workers(&self) -> BTreeMap<String, WorkerRecord> {
        self.inner.lock().workers.clone()
    }

    pub fn is_blocked(&self, worker_id: &str) -> bool {
        self.worker(worker_id).blocked
    }

    /// Number of HITs that are open or leased.
    pub fn live_count(&self) -> usize {
        self.inner
            .lock()
            .hits
            .values()
            .filter(|h| matches!(h.status, HitStatus::Open | HitStatus::Leased))
            .count()
    }

    /// Leases the first available HIT the worker is eligible for. A worker is
    /// ineligible for a HIT carrying an annotation they already reviewed.
    pub fn lease(&self, worker_id: &str, now: u64) -> Option<Hit> {
        let mut inner = self.inner.lock();
        if inner.workers.get(worker_id).is_some_and(|w| w.blocked) {
            return None;
        }
        let Inner {
            hits, reviewed_by, ..
        } = &mut *inner;
        let hit = hits.values_mut().find(|h| {
            h.is_available(now)
                && h.real_subtasks().all(|(_, s)| {
                    !reviewed_by
                        .get(&s.ann_id)
                        .is_some_and(|ws| ws.contains(worker_id))
                })
        })?;
        hit.status = HitStatus::Leased;
        hit.lease = Some(Lease {
            worker_id: worker_id.to_string(),
            expires_at: now + self.cfg.lease_duration_secs,
        });
        Some(hit.clone())
    }

    /// Checks that `worker_id` holds an unexpired lease on `hit_id`.
    pub fn check_lease(&self, hit_id: &str, worker_id: &str, now: u64) -> Result<Hit> {
        let inner = self.inner.lock();
        let hit = inner
            .hits
            .get(hit_id)
            .ok_or_else(|| CrowdError::UnknownHit(hit_id.to_string()))?;
        let held = hit.status == HitStatus::Leased
            && hit
                .lease
                .as_ref()
                .is_some_and(|l| l.worker_id == worker_id && l.expires_at > now);
        if !held {
            return Err(CrowdError::StaleLease {
                hit_id: hit_id.to_string(),
                worker_id: worker_id.to_string(),
            });
        }
        Ok(hit.clone())
    }

    /// Gates a submission on the gold subtask and settles the HIT. Rejected
    /// HITs release their real annotations for re-assembly.
    pub fn submit(
        &self,
        hit_id: &str,
        worker_id: &str,
        answer: &[SubtaskAnswer],
        now: u64,
    ) -> Result<ApprovalOutcome> {
        self.check_lease(hit_id, worker_id, now)?;
        let mut inner = self.inner.lock();
        let hit = inner.hits.get_mut(hit_id).expect("checked above");
        hit.status = HitStatus::Submitted;
        let outcome = match auto_approve(hit, answer, &self.cfg) {
            Ok(o) => o,
            Err(e) => {
                hit.status = HitStatus::Leased;
                return Err(e);
            }
        };
        hit.status = if outcome.approved {
            HitStatus::Approved
        } else {
            HitStatus::Rejected
        };
        let carried: Vec<String> = hit.real_subtasks().map(|(_, s)| s.ann_id.clone()).collect();
        for ann in &carried {
            inner.in_flight.remove(ann);
        }
        for f in &outcome.forwarded {
            inner
                .reviewed_by
                .entry(f.ann_id.clone())
                .or_default()
                .insert(worker_id.to_string());
        }
        let block_after = self.cfg.block_after_rejections;
        let rec = inner.workers.entry(worker_id.to_string()).or_default();
        if outcome.approved {
            rec.approved += 1;
            rec.consecutive_rejections = 0;
        } else {
            rec.rejected += 1;
            rec.consecutive_rejections += 1;
            if block_after > 0 && rec.consecutive_rejections >= block_after {
                if !rec.blocked {
                    log::info!("worker {worker_id} blocked after {block_after} consecutive rejections");
                }
                rec.blocked = true;
            }
        }
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crowdgate::{SubTask, SubtaskKind};
    use crate::geometry::BBox;
    use crate::labelstore::ClassLabel;
    use std::sync::Arc;

    fn unit() -> BBox {
        BBox::new(0.0, 0.0, 10.0, 10.0).unwrap()
    }

    fn hit(id: &str, real: &[&str]) -> Hit {
        let mut subs: Vec<SubTask> = real
            .iter()
            .map(|a| SubTask {
                ann_id: a.to_string(),
                image_id: "img".into(),
                crop_viewport: unit(),
                proposed_box: unit(),
                proposed_class: ClassLabel::object("Rockfish"),
                kind: SubtaskKind::Real,
                truth: None,
            })
            .collect();
        while subs.len() < 9 {
            subs.push(SubTask {
                ann_id: "f".into(),
                image_id: "img".into(),
                crop_viewport: unit(),
                proposed_box: unit(),
                proposed_class: ClassLabel::object("Rockfish"),
                kind: SubtaskKind::Filler,
                truth: Some((ClassLabel::object("Rockfish"), unit())),
            });
        }
        subs.push(SubTask {
            ann_id: "g".into(),
            image_id: "img".into(),
            crop_viewport: unit(),
            proposed_box: unit(),
            proposed_class: ClassLabel::object("Rockfish"),
            kind: SubtaskKind::Gold,
            truth: Some((ClassLabel::object("Rockfish"), unit())),
        });
        Hit::new(id, subs).unwrap()
    }

    fn answer(gold: BBox) -> Vec<SubtaskAnswer> {
        let mut v = vec![
            SubtaskAnswer {
                adjusted_box: unit(),
                selected_class: ClassLabel::object("Rockfish"),
            };
            9
        ];
        v.push(SubtaskAnswer {
            adjusted_box: gold,
            selected_class: ClassLabel::object("Rockfish"),
        });
        v
    }

    fn bad() -> BBox {
        BBox::new(0.0, 0.0, 3.0, 3.0).unwrap()
    }

    #[test]
    fn lease_is_exclusive_until_expiry() {
        let pool = HitPool::new(CrowdConfig::default());
        pool.insert(vec![hit("h1", &["a"])]);
        assert!(pool.lease("w1", 0).is_some());
        assert!(pool.lease("w2", 10).is_none());
        let again = pool.lease("w2", 600).unwrap();
        assert_eq!(again.lease.unwrap().worker_id, "w2");
        assert!(matches!(
            pool.submit("h1", "w1", &answer(unit()), 601),
            Err(CrowdError::StaleLease { .. })
        ));
        assert!(pool.submit("h1", "w2", &answer(unit()), 601).unwrap().approved);
    }

    #[test]
    fn expired_lease_cannot_submit() {
        let pool = HitPool::new(CrowdConfig::default());
        pool.insert(vec![hit("h1", &["a"])]);
        pool.lease("w1", 0).unwrap();
        assert!(matches!(
            pool.submit("h1", "w1", &answer(unit()), 600),
            Err(CrowdError::StaleLease { .. })
        ));
    }

    #[test]
    fn three_rejections_block() {
        let pool = HitPool::new(CrowdConfig::default());
        pool.insert((0..4).map(|i| hit(&format!("h{i}"), &[&format!("a{i}")])).collect());
        for i in 0..3 {
            let h = pool.lease("spam", i).unwrap();
            assert!(!pool.submit(&h.hit_id, "spam", &answer(bad()), i).unwrap().approved);
        }
        assert!(pool.is_blocked("spam"));
        assert!(pool.lease("spam", 10).is_none());
        assert!(pool.lease("good", 10).is_some());
    }

    #[test]
    fn approval_resets_rejection_streak() {
        let pool = HitPool::new(CrowdConfig::default());
        pool.insert((0..4).map(|i| hit(&format!("h{i}"), &[&format!("a{i}")])).collect());
        for (i, g) in [bad(), bad(), unit(), bad()].into_iter().enumerate() {
            let h = pool.lease("w", i as u64).unwrap();
            pool.submit(&h.hit_id, "w", &answer(g), i as u64).unwrap();
        }
        let rec = pool.worker("w");
        assert_eq!(rec.consecutive_rejections, 1);
        assert!(!rec.blocked);
    }

    #[test]
    fn reviewer_cannot_see_the_same_annotation_again() {
        let pool = HitPool::new(CrowdConfig::default());
        pool.insert(vec![hit("h1", &["a"])]);
        let h = pool.lease("w1", 0).unwrap();
        pool.submit(&h.hit_id, "w1", &answer(unit()), 1).unwrap();
        pool.insert(vec![hit("h2", &["a"])]);
        assert!(pool.lease("w1", 2).is_none());
        assert!(pool.lease("w2", 2).is_some());
    }

    #[test]
    fn rejection_releases_annotations() {
        let pool = HitPool::new(CrowdConfig::default());
        pool.insert(vec![hit("h1", &["a", "b"])]);
        assert!(pool.is_in_flight("a"));
        let h = pool.lease("w1", 0).unwrap();
        let out = pool.submit(&h.hit_id, "w1", &answer(bad()), 1).unwrap();
        assert_eq!(out.returned, vec!["a".to_string(), "b".to_string()]);
        assert!(!pool.is_in_flight("a"));
    }

    #[test]
    fn concurrent_leases_never_share_a_hit() {
        let pool = Arc::new(HitPool::new(CrowdConfig::default()));
        pool.insert((0..50).map(|i| hit(&format!("h{i:02}"), &[&format!("a{i}")])).collect());
        let handles: Vec<_> = (0..8)
            .map(|w| {
                let pool = Arc::clone(&pool);
                std::thread::spawn(move || {
                    let mut got = Vec::new();
                    while let Some(h) = pool.lease(&format!("w{w}"), 0) {
                        got.push(h.hit_id);
                    }
                    got
                })
            })
            .collect();
        let mut all: Vec<String> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        assert_eq!(all.len(), 50);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 50);
    }
}
