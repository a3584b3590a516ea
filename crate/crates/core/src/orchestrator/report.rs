use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::metrics::{average_precision, matched_truths, precision_by_class, EvalDetection, EvalTruth};
use super::{Result, SimConfig, Seeds};
use crate::detector::{Detector, HiddenWorld, ModelState, SimDetector};
use crate::labelstore::{
    AnnotationState, LabelStore, LoggedEvent, Split, StoreEvent, TrainingSummary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CountDelta {
    pub count: u64,
    pub delta: i64,
}

impl CountDelta {
    fn next(prev: Option<&CountDelta>, count: u64) -> Self {
        let before = prev.map_or(0, |p| p.count);
        Self {
            count,
            delta: count as i64 - before as i64,
        }
    }
}

/// HIT submissions audited during one loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HitStats {
    pub submitted: u64,
    pub approved: u64,
    pub rejected: u64,
    /// Submissions refused for a missing or expired lease.
    pub stale: u64,
}

/// One row of the per-loop results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub loop_index: u32,
    pub config_hash: String,
    /// Verified object labels (seed plus approved) per class.
    pub labels: BTreeMap<String, CountDelta>,
    pub background: CountDelta,
    /// Approved object labels over all classes.
    pub approved: u64,
    pub new_approved: u64,
    /// New approvals over all verified object labels.
    pub delta_ratio: f64,
    /// Fraction of pool-image objects matched by an approved label.
    pub coverage: f64,
    pub precision: BTreeMap<String, Option<f64>>,
    pub ap: BTreeMap<String, f64>,
    pub map: Option<f64>,
    pub hits: HitStats,
    /// Annotations still awaiting a crowd decision.
    pub pending: u64,
    pub training: TrainingSummary,
}

/// Rebuilds the label store from events and emits a report at every loop
/// commit. Reports depend on nothing but the events, the hidden world and
/// the run config.
#[derive(Debug, Clone)]
pub struct ReportBuilder {
    world: Arc<HiddenWorld>,
    detector: SimDetector,
    config_hash: String,
    publish_threshold: f64,
    eval_iou: f64,
    store: LabelStore,
    hits: HitStats,
    prev: Option<LoopReport>,
}

impl ReportBuilder {
    pub fn new(world: Arc<HiddenWorld>, cfg: &SimConfig) -> Result<Self> {
        let seeds = Seeds::derive(cfg.seed);
        let detector = SimDetector::new(world.clone(), cfg.detector.clone(), seeds.detector)?;
        Ok(Self {
            world,
            detector,
            config_hash: cfg.hash(),
            publish_threshold: cfg.run.publish_threshold,
            eval_iou: cfg.run.eval_iou,
            store: LabelStore::default(),
            hits: HitStats::default(),
            prev: None,
        })
    }

    pub fn ingest(&mut self, logged: LoggedEvent) -> Result<Option<LoopReport>> {
        let event = logged.event.clone();
        self.store.apply_logged(logged)?;
        match event {
            StoreEvent::HitAudited { audit } => {
                if audit.gold_ann_id.is_none() {
                    self.hits.stale += 1;
                } else {
                    self.hits.submitted += 1;
                    if audit.approved {
                        self.hits.approved += 1;
                    } else {
                        self.hits.rejected += 1;
                    }
                }
                Ok(None)
            }
            StoreEvent::LoopCommitted { loop_index, summary } => {
                let report = self.build(loop_index, summary)?;
                self.hits = HitStats::default();
                self.prev = Some(report.clone());
                Ok(Some(report))
            }
            _ => Ok(None),
        }
    }

    fn build(&self, loop_index: u32, training: TrainingSummary) -> Result<LoopReport> {
        let data = self.store.dataset();
        let prev = self.prev.as_ref();
        let verified = data.class_counts(&[AnnotationState::Seed, AnnotationState::Approved]);
        let labels: BTreeMap<String, CountDelta> = data
            .catalog
            .names()
            .iter()
            .map(|c| {
                let n = verified
                    .iter()
                    .find(|(k, _)| k.as_str() == c)
                    .map_or(0, |(_, v)| *v);
                (c.clone(), CountDelta::next(prev.and_then(|p| p.labels.get(c)), n))
            })
            .collect();
        let states = data.state_counts();
        let count = |s| states.get(&s).copied().unwrap_or(0);
        let approved = count(AnnotationState::Approved);
        let new_approved = approved.saturating_sub(prev.map_or(0, |p| p.approved));
        let total: u64 = labels.values().map(|c| c.count).sum();
        let pending = count(AnnotationState::Predicted)
            + count(AnnotationState::PendingReview)
            + count(AnnotationState::Republished);

        let truths: Vec<EvalTruth> = self
            .world
            .images
            .values()
            .flat_map(|img| {
                img.objects.iter().map(move |o| EvalTruth {
                    id: o.object_id.clone(),
                    image_id: img.record.image_id.clone(),
                    class_label: o.class_label.clone(),
                    bbox: o.bbox,
                })
            })
            .collect();
        let state = ModelState {
            tag: format!("eval-{loop_index}"),
            summary: training.clone(),
        };
        let mut detections = Vec::new();
        for image_id in self.world.images.keys() {
            for d in self.detector.detect(image_id, &state)? {
                detections.push(EvalDetection {
                    image_id: image_id.clone(),
                    class_label: d.class_label,
                    bbox: d.bbox,
                    score: d.score,
                });
            }
        }
        let ap = average_precision(&detections, &truths, self.eval_iou);
        let precision = precision_by_class(
            &detections,
            &truths,
            data.catalog.names(),
            self.eval_iou,
            self.publish_threshold,
        );

        let pool_truths: Vec<EvalTruth> = truths
            .iter()
            .filter(|t| self.world.images[&t.image_id].record.split == Split::Pool)
            .cloned()
            .collect();
        let approved_labels: Vec<EvalTruth> = data
            .annotations_in(&[AnnotationState::Approved])
            .map(|a| EvalTruth {
                id: a.ann_id.clone(),
                image_id: a.image_id.clone(),
                class_label: a.class_label.clone(),
                bbox: a.bbox,
            })
            .collect();
        let covered = matched_truths(&approved_labels, &pool_truths, self.eval_iou).len();
        let coverage = if pool_truths.is_empty() {
            1.0
        } else {
            covered as f64 / pool_truths.len() as f64
        };

        Ok(LoopReport {
            loop_index,
            config_hash: self.config_hash.clone(),
            labels,
            background: CountDelta::next(prev.map(|p| &p.background), count(AnnotationState::BackgroundConfirmed)),
            approved,
            new_approved,
            delta_ratio: new_approved as f64 / total.max(1) as f64,
            coverage,
            precision,
            ap: ap.per_class,
            map: ap.map,
            hits: self.hits,
            pending,
            training,
        })
    }
}

/// Recomputes every loop report from an event log.
pub fn replay_reports<I>(events: I, world: Arc<HiddenWorld>, cfg: &SimConfig) -> Result<Vec<LoopReport>>
where
    I: IntoIterator<Item = LoggedEvent>,
{
    let mut builder = ReportBuilder::new(world, cfg)?;
    let mut out = Vec::new();
    for e in events {
        if let Some(r) = builder.ingest(e)? {
            out.push(r);
        }
    }
    Ok(out)
}

fn csv_header(classes: &[String]) -> Vec<String> {
    let mut h = vec!["loop".to_string()];
    for c in classes {
        h.push(format!("{c}_count"));
        h.push(format!("{c}_delta"));
    }
    h.extend(["background_count", "background_delta", "approved", "new_approved", "delta_ratio", "coverage"].map(String::from));
    for c in classes {
        h.push(format!("precision_{c}"));
    }
    for c in classes {
        h.push(format!("ap_{c}"));
    }
    h.extend(
        ["map", "hits_submitted", "hits_approved", "hits_rejected", "hits_stale", "pending", "final_loss", "config_hash"]
            .map(String::from),
    );
    h
}

fn csv_row(r: &LoopReport, classes: &[String]) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut row = vec![r.loop_index.to_string()];
    for c in classes {
        let cd = r.labels.get(c).copied().unwrap_or_default();
        row.push(cd.count.to_string());
        row.push(cd.delta.to_string());
    }
    row.push(r.background.count.to_string());
    row.push(r.background.delta.to_string());
    row.push(r.approved.to_string());
    row.push(r.new_approved.to_string());
    row.push(r.delta_ratio.to_string());
    row.push(r.coverage.to_string());
    for c in classes {
        row.push(opt(r.precision.get(c).copied().flatten()));
    }
    for c in classes {
        row.push(opt(r.ap.get(c).copied()));
    }
    row.push(opt(r.map));
    row.push(r.hits.submitted.to_string());
    row.push(r.hits.approved.to_string());
    row.push(r.hits.rejected.to_string());
    row.push(r.hits.stale.to_string());
    row.push(r.pending.to_string());
    row.push(opt(r.training.final_loss));
    row.push(r.config_hash.clone());
    row
}

fn classes_of(reports: &[LoopReport]) -> Vec<String> {
    reports
        .first()
        .map(|r| r.labels.keys().cloned().collect())
        .unwrap_or_default()
}

pub fn write_report_csv<W: Write>(w: W, report: &LoopReport) -> Result<()> {
    write_summary_csv(w, std::slice::from_ref(report))
}

pub fn write_summary_csv<W: Write>(w: W, reports: &[LoopReport]) -> Result<()> {
    let classes = classes_of(reports);
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(csv_header(&classes))?;
    for r in reports {
        wr.write_record(csv_row(r, &classes))?;
    }
    wr.flush()?;
    Ok(())
}

/// Plain-text results table: one row per loop, label counts as
/// `count(+delta)`, then mAP at IoU 0.5.
pub fn render_table(reports: &[LoopReport]) -> String {
    let classes = classes_of(reports);
    let mut header: Vec<String> = vec!["Loop".into()];
    header.extend(classes.iter().cloned());
    header.push("Background".into());
    header.push("mAP/50".into());
    let fmt = |c: &CountDelta| {
        if c.delta >= 0 {
            format!("{}(+{})", c.count, c.delta)
        } else {
            format!("{}({})", c.count, c.delta)
        }
    };
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.loop_index.to_string()];
            for c in &classes {
                row.push(fmt(&r.labels.get(c).copied().unwrap_or_default()));
            }
            row.push(fmt(&r.background));
            row.push(r.map.map_or("-".into(), |m| format!("{m:.4}")));
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&rows) {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}
