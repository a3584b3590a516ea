use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::{matched_truths, EvalTruth};
use super::report::{write_report_csv, write_summary_csv, render_table, LoopReport, ReportBuilder};
use super::{has_converged, OrchestratorError, Result, RunMode, Seeds, SimConfig};
use crate::crowdgate::CrowdSession;
use crate::detector::{filter_new, Detector, HiddenWorld, ModelState, SimDetector, SimFeatures};
use crate::labelstore::{
    read_event_log, write_event_log, Annotation, AnnotationState, LabelStore, LoggedEvent, Split,
    StoreEvent, TrainingSummary,
};
use crate::rng;
use crate::trainer::{train_epochs, write_loss_trace, LinearLogistic, LossBreakdown, TrainImage};
use crate::workersim::{answer_hit, population, WorkerProfile};

/// Written next to a run's event log; enough to replay its reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub mode: RunMode,
    pub seeds: Seeds,
    pub loops_run: u32,
    pub converged: bool,
    pub config: SimConfig,
}

/// Everything a loop may change. A loop works on a copy and the copy
/// replaces the original only when the whole loop succeeded.
#[derive(Debug, Clone)]
struct LoopState {
    store: LabelStore,
    session: CrowdSession,
    model: LinearLogistic,
    clock: u64,
    summary: TrainingSummary,
    builder: ReportBuilder,
    fed: usize,
}

/// A simulated labeling run over a generated hidden world.
#[derive(Debug)]
pub struct Simulation {
    cfg: SimConfig,
    seeds: Seeds,
    world: Arc<HiddenWorld>,
    detector: SimDetector,
    features: SimFeatures,
    workers: Vec<WorkerProfile>,
    state: LoopState,
    reports: Vec<LoopReport>,
    traces: Vec<Vec<LossBreakdown>>,
    undotted: BTreeSet<String>,
    next_loop: u32,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self> {
        let seeds = Seeds::derive(cfg.seed);
        let world = HiddenWorld::generate(&cfg.world, seeds.world)?;
        Self::with_world(cfg, world)
    }

    /// Sets up the store: every image, the seed-split boxes as verified
    /// labels and, in dot mode, one dot per pool object except a withheld
    /// fraction.
    pub fn with_world(cfg: SimConfig, world: HiddenWorld) -> Result<Self> {
        cfg.validate()?;
        let seeds = Seeds::derive(cfg.seed);
        let world = Arc::new(world);
        let detector = SimDetector::new(world.clone(), cfg.detector.clone(), seeds.detector)?;
        let workers = population(&cfg.population, seeds.population)?;

        let mut store = LabelStore::default();
        store.import_boxes(&world.document(false, |img| img.record.split == Split::Seed))?;
        let mut undotted = BTreeSet::new();
        if cfg.run.mode == RunMode::LegacyDots {
            let (csv, missing) = dot_file(&world, &cfg, seeds.dots)?;
            store.import_dots(csv.as_bytes(), cfg.run.dot_half_extent, None)?;
            undotted = missing;
        }

        let mut builder = ReportBuilder::new(world.clone(), &cfg)?;
        for e in store.events() {
            builder.ingest(e.clone())?;
        }
        let fed = store.events().len();
        let state = LoopState {
            store,
            session: CrowdSession::new(cfg.crowd.clone(), seeds.crowd),
            model: LinearLogistic::zeros(4),
            clock: 0,
            summary: TrainingSummary::default(),
            builder,
            fed,
        };
        Ok(Self {
            features: SimFeatures::new(world.clone()),
            cfg,
            seeds,
            world,
            detector,
            workers,
            state,
            reports: Vec::new(),
            traces: Vec::new(),
            undotted,
            next_loop: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Mutable access to the config, for changing parameters between loops.
    pub fn config_mut(&mut self) -> &mut SimConfig {
        &mut self.cfg
    }

    pub fn seeds(&self) -> &Seeds {
        &self.seeds
    }

    pub fn world(&self) -> &Arc<HiddenWorld> {
        &self.world
    }

    pub fn store(&self) -> &LabelStore {
        &self.state.store
    }

    pub fn session(&self) -> &CrowdSession {
        &self.state.session
    }

    pub fn workers(&self) -> &[WorkerProfile] {
        &self.workers
    }

    pub fn reports(&self) -> &[LoopReport] {
        &self.reports
    }

    /// Loss trace of each loop's training pass.
    pub fn traces(&self) -> &[Vec<LossBreakdown>] {
        &self.traces
    }

    /// Pool objects that received no dot.
    pub fn undotted(&self) -> &BTreeSet<String> {
        &self.undotted
    }

    pub fn next_loop(&self) -> u32 {
        self.next_loop
    }

    /// True once the loops after the first have stopped adding labels.
    pub fn converged(&self) -> bool {
        let ratios: Vec<f64> = self
            .reports
            .iter()
            .filter(|r| r.loop_index >= 1)
            .map(|r| r.delta_ratio)
            .collect();
        has_converged(&ratios, self.cfg.run.epsilon, self.cfg.run.patience)
    }

    /// Runs loops until convergence or `max_loops` loops after the first.
    pub fn run(&mut self) -> Result<&[LoopReport]> {
        while self.next_loop <= self.cfg.run.max_loops && !self.converged() {
            self.run_loop()?;
        }
        Ok(&self.reports)
    }

    /// Runs the next loop. Loop 0 trains the first model: on the seed images
    /// in `FromSeed` mode, or on the crowd-tightened dot boxes in
    /// `LegacyDots` mode. Later loops predict, review and retrain. On error
    /// nothing of the loop is kept.
    pub fn run_loop(&mut self) -> Result<LoopReport> {
        let k = self.next_loop;
        let mut st = self.state.clone();
        if k > 0 {
            self.detect_phase(&mut st, k)?;
        }
        if k > 0 || self.cfg.run.mode == RunMode::LegacyDots {
            self.crowd_phase(&mut st)?;
        }
        let (summary, trace) = self.train_phase(&mut st, k)?;
        st.store.commit(StoreEvent::LoopCommitted {
            loop_index: k,
            summary: summary.clone(),
        })?;
        st.summary = summary;

        let mut report = None;
        for e in &st.store.events()[st.fed..] {
            report = st.builder.ingest(e.clone())?.or(report);
        }
        st.fed = st.store.events().len();
        let report = report.expect("loop commit yields a report");

        self.state = st;
        self.reports.push(report.clone());
        self.traces.push(trace);
        self.next_loop += 1;
        log::info!(
            "loop {k}: {} new approved, coverage {:.3}, delta ratio {:.4}",
            report.new_approved,
            report.coverage,
            report.delta_ratio
        );
        Ok(report)
    }

    fn detect_phase(&self, st: &mut LoopState, k: u32) -> Result<usize> {
        let state = ModelState {
            tag: format!("loop-{k}"),
            summary: st.summary.clone(),
        };
        let mut added = 0;
        for img in self.world.images.values().filter(|i| i.record.split == Split::Pool) {
            let id = &img.record.image_id;
            let dets: Vec<_> = self
                .detector
                .detect(id, &state)?
                .into_iter()
                .filter(|d| d.score >= self.cfg.run.publish_threshold)
                .collect();
            let existing: Vec<&Annotation> = st.store.dataset().annotations_on(id).collect();
            for d in filter_new(&dets, &existing, self.cfg.run.dedup_iou) {
                let ann_id = st.store.fresh_ann_id("pred");
                st.store.add_annotation(Annotation::new(
                    ann_id,
                    id.clone(),
                    d.class_label,
                    d.bbox,
                    AnnotationState::Predicted,
                    Some(d.score),
                ))?;
                added += 1;
            }
        }
        Ok(added)
    }

    /// Workers take turns leasing and answering HITs until a full round
    /// leases nothing.
    fn crowd_phase(&self, st: &mut LoopState) -> Result<()> {
        for _ in 0..self.cfg.run.max_crowd_rounds {
            let mut leased = 0;
            for w in &self.workers {
                st.clock += 1;
                let Some(view) = st.session.lease(&mut st.store, &w.worker_id, st.clock)? else {
                    continue;
                };
                leased += 1;
                let answer = answer_hit(w, &view, &self.world, self.seeds.answers)?;
                st.clock += 1;
                st.session
                    .submit(&mut st.store, &view.hit_id, &w.worker_id, &answer.subtasks, st.clock)?;
            }
            if leased == 0 {
                return Ok(());
            }
        }
        log::warn!("crowd phase stopped after {} rounds", self.cfg.run.max_crowd_rounds);
        Ok(())
    }

    fn train_phase(&self, st: &mut LoopState, k: u32) -> Result<(TrainingSummary, Vec<LossBreakdown>)> {
        let data = st.store.dataset();
        let mut images: Vec<TrainImage> = data
            .images
            .values()
            .map(|rec| {
                let mut objects = Vec::new();
                let mut background = Vec::new();
                for a in data.annotations_on(&rec.image_id) {
                    if a.state.is_labeled_object() {
                        objects.push(a.bbox);
                    } else if a.state == AnnotationState::BackgroundConfirmed && self.cfg.run.background_training {
                        background.push(a.bbox);
                    }
                }
                TrainImage {
                    image_id: rec.image_id.clone(),
                    extent: rec.extent(),
                    objects,
                    background,
                }
            })
            .filter(|t| !t.objects.is_empty())
            .collect();
        images.shuffle(&mut rng::stream(self.seeds.train, &["pick", &k.to_string()]));
        images.truncate(self.cfg.run.train_images_per_loop);

        let outcome = train_epochs(
            &mut st.model,
            &images,
            &self.features,
            &self.cfg.trainer,
            self.cfg.trainer.epochs,
            rng::derive(self.seeds.train, format!("loop-{k}")),
        )?;

        let verified = data.class_counts(&[AnnotationState::Seed, AnnotationState::Approved]);
        let labeled_per_class: BTreeMap<String, u64> = data
            .catalog
            .labels()
            .map(|c| (c.to_string(), verified.get(&c).copied().unwrap_or(0)))
            .collect();
        let background_labels = if self.cfg.run.background_training {
            data.annotations_in(&[AnnotationState::BackgroundConfirmed]).count() as u64
        } else {
            0
        };
        let summary = TrainingSummary {
            labeled_per_class,
            background_labels,
            final_loss: outcome.final_loss(),
        };
        Ok((summary, outcome.trace))
    }

    /// Fraction of the withheld (undotted) objects now matched by an
    /// approved label.
    pub fn undotted_recovery(&self) -> Option<f64> {
        if self.undotted.is_empty() {
            return None;
        }
        let truths: Vec<EvalTruth> = self
            .world
            .objects()
            .filter(|(_, o)| self.undotted.contains(&o.object_id))
            .map(|(img, o)| EvalTruth {
                id: o.object_id.clone(),
                image_id: img.to_string(),
                class_label: o.class_label.clone(),
                bbox: o.bbox,
            })
            .collect();
        let labels: Vec<EvalTruth> = self
            .state
            .store
            .dataset()
            .annotations_in(&[AnnotationState::Approved])
            .map(|a| EvalTruth {
                id: a.ann_id.clone(),
                image_id: a.image_id.clone(),
                class_label: a.class_label.clone(),
                bbox: a.bbox,
            })
            .collect();
        let found = matched_truths(&labels, &truths, self.cfg.run.eval_iou).len();
        Some(found as f64 / truths.len() as f64)
    }

    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            config_hash: self.cfg.hash(),
            mode: self.cfg.run.mode,
            seeds: self.seeds,
            loops_run: self.next_loop,
            converged: self.converged(),
            config: self.cfg.clone(),
        }
    }

    /// Writes the event log, hidden world, manifest, per-loop reports and
    /// loss traces under `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("reports"))?;
        fs::create_dir_all(dir.join("traces"))?;
        write_event_log(&dir.join("events.jsonl"), self.state.store.events())?;
        self.world.save(&dir.join("world.json"))?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest())? + "\n")?;
        for r in &self.reports {
            let stem = format!("loop_{}", r.loop_index);
            fs::write(
                dir.join("reports").join(format!("{stem}.json")),
                serde_json::to_string_pretty(r)? + "\n",
            )?;
            write_report_csv(fs::File::create(dir.join("reports").join(format!("{stem}.csv")))?, r)?;
        }
        write_summary_csv(fs::File::create(dir.join("reports").join("summary.csv"))?, &self.reports)?;
        fs::write(dir.join("reports").join("table.txt"), render_table(&self.reports))?;
        for (i, trace) in self.traces.iter().enumerate() {
            write_loss_trace(fs::File::create(dir.join("traces").join(format!("loop_{i}.csv")))?, trace)?;
        }
        Ok(())
    }

    /// Recomputes the reports of a run directory from its event log.
    pub fn replay_dir(dir: &Path) -> Result<(RunManifest, Vec<LoopReport>)> {
        let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let world = Arc::new(HiddenWorld::load(&dir.join("world.json"))?);
        let events: Vec<LoggedEvent> = read_event_log(&dir.join("events.jsonl"))?;
        let reports = super::replay_reports(events, world, &manifest.config)?;
        Ok((manifest, reports))
    }
}

/// Dot CSV for every pool object except a withheld fraction, with dots
/// jittered around object centres and kept inside the object.
fn dot_file(world: &HiddenWorld, cfg: &SimConfig, seed: u64) -> Result<(String, BTreeSet<String>)> {
    let objects: Vec<_> = world
        .images
        .values()
        .filter(|i| i.record.split == Split::Pool)
        .flat_map(|i| i.objects.iter().map(move |o| (i.record.image_id.as_str(), o)))
        .collect();
    let n_missing = (cfg.run.missing_dot_fraction * objects.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.shuffle(&mut rng::stream(seed, &["missing"]));
    let missing: BTreeSet<String> = order[..n_missing]
        .iter()
        .map(|&i| objects[i].1.object_id.clone())
        .collect();

    let mut wr = csv::Writer::from_writer(Vec::new());
    wr.write_record(["image_id", "x", "y", "class_label"])?;
    for (image_id, o) in &objects {
        if missing.contains(&o.object_id) {
            continue;
        }
        let mut r = rng::stream(seed, &["dot", &o.object_id]);
        let (cx, cy) = o.bbox.center();
        let mut jitter = |s: f64| {
            if s > 0.0 {
                Normal::new(0.0, s).expect("finite").sample(&mut r)
            } else {
                0.0
            }
        };
        let x = (cx + jitter(cfg.run.dot_jitter * o.bbox.width())).clamp(o.bbox.x_min(), o.bbox.x_max());
        let y = (cy + jitter(cfg.run.dot_jitter * o.bbox.height())).clamp(o.bbox.y_min(), o.bbox.y_max());
        wr.write_record([image_id.to_string(), format!("{x:.2}"), format!("{y:.2}"), o.class_label.to_string()])?;
    }
    let bytes = wr.into_inner().map_err(|e| OrchestratorError::Io(e.into_error()))?;
    Ok((String::from_utf8(bytes).expect("csv output is utf-8"), missing))
}

/// Paired runs with and without background-label training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPair {
    pub seed: u64,
    pub on: Vec<LoopReport>,
    pub off: Vec<LoopReport>,
}

impl AblationPair {
    /// Per-class precision of each arm, averaged over the loops after the
    /// first that both arms ran.
    pub fn mean_precision(&self) -> BTreeMap<String, (f64, f64)> {
        let last = self
            .on
            .last()
            .map_or(0, |r| r.loop_index)
            .min(self.off.last().map_or(0, |r| r.loop_index));
        let mean = |reports: &[LoopReport], class: &str| {
            let v: Vec<f64> = reports
                .iter()
                .filter(|r| r.loop_index >= 1 && r.loop_index <= last)
                .filter_map(|r| r.precision.get(class).copied().flatten())
                .collect();
            if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let classes: BTreeSet<&String> = self.on.iter().chain(&self.off).flat_map(|r| r.precision.keys()).collect();
        classes
            .into_iter()
            .map(|c| (c.clone(), (mean(&self.on, c), mean(&self.off, c))))
            .collect()
    }

    /// Whether background training matched or beat the other arm for every
    /// class.
    pub fn on_at_least_off(&self) -> bool {
        self.mean_precision().values().all(|(on, off)| on >= off)
    }
}

/// Runs each seed twice, with background training on and off, and
/// everything else identical.
pub fn precision_ablation(cfg: &SimConfig, seeds: &[u64]) -> Result<Vec<AblationPair>> {
    seeds
        .iter()
        .map(|&seed| {
            let arm = |on: bool| -> Result<Vec<LoopReport>> {
                let mut c = cfg.clone();
                c.seed = seed;
                c.run.background_training = on;
                let mut sim = Simulation::new(c)?;
                sim.run()?;
                Ok(sim.reports().to_vec())
            };
            Ok(AblationPair {
                seed,
                on: arm(true)?,
                off: arm(false)?,
            })
        })
        .collect()
}
