//! The detector contract and a simulated detector.
//!
//! The simulated detector reads a hidden ground-truth world. Its recall for
//! a class grows with the fraction of that class already labeled, and its
//! false-positive rate decays with the number of background labels it was
//! trained on. Every draw comes from a seed derived from the run seed, the
//! model state tag, the image and the object, so detections are a pure
//! function of those inputs, and two runs that differ only in state share
//! their random numbers.

mod features;
mod world;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BBox, GeometryError};
use crate::labelstore::{Annotation, AnnotationState, ClassLabel, Split, StoreError, TrainingSummary};
use crate::rng;

pub use features::SimFeatures;
pub use world::{HiddenImage, HiddenObject, HiddenWorld, WorldConfig};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("invalid detector config: {0}")]
    InvalidConfig(String),
    #[error("document is not marked hidden; refusing to treat it as ground truth")]
    NotHidden,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DetectError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_label: ClassLabel,
    pub score: f64,
}

/// What a detector was trained on, plus a tag naming the prediction pass.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelState {
    pub tag: String,
    pub summary: TrainingSummary,
}

pub trait Detector {
    fn detect(&self, image_id: &str, state: &ModelState) -> Result<Vec<Detection>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimDetectorConfig {
    pub p_min: f64,
    pub p_max: f64,
    /// Edge noise as a fraction of object width/height.
    pub box_jitter_sigma: f64,
    pub fp_rate0: f64,
    pub fp_decay_beta: f64,
    /// Beta parameters of true-detection scores.
    pub true_score: (f64, f64),
    /// Beta parameters of false-positive scores.
    pub fp_score: (f64, f64),
    /// Probability that a true detection carries a wrong class.
    pub class_confusion: f64,
    pub fp_size: (f64, f64),
}

impl Default for SimDetectorConfig {
    fn default() -> Self {
        Self {
            p_min: 0.35,
            p_max: 0.95,
            box_jitter_sigma: 0.05,
            fp_rate0: 1.5,
            fp_decay_beta: 0.02,
            true_score: (5.0, 2.0),
            fp_score: (2.0, 5.0),
            class_confusion: 0.05,
            fp_size: (40.0, 160.0),
        }
    }
}

impl SimDetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DetectError::InvalidConfig(m.to_string()));
        if !(0.0 <= self.p_min && self.p_min <= self.p_max && self.p_max <= 1.0) {
            return bad("require 0 <= p_min <= p_max <= 1");
        }
        if self.box_jitter_sigma < 0.0 || self.fp_rate0 < 0.0 || self.fp_decay_beta < 0.0 {
            return bad("rates and noise must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.class_confusion) {
            return bad("class_confusion must lie in [0, 1]");
        }
        for (a, b) in [self.true_score, self.fp_score] {
            if !(a > 0.0 && b > 0.0) {
                return bad("beta parameters must be positive");
            }
        }
        if !(self.fp_size.0 > 0.0 && self.fp_size.0 <= self.fp_size.1) {
            return bad("fp_size must be an ordered positive range");
        }
        Ok(())
    }
}

/// Smallest `k` with `P(Poisson(lambda) <= k) >= u`.
fn poisson_quantile(lambda: f64, u: f64) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let mut k = 0usize;
    let mut p = (-lambda).exp();
    let mut cum = p;
    while u > cum && k < 10_000 {
        k += 1;
        p *= lambda / k as f64;
        cum += p;
    }
    k
}

#[derive(Debug, Clone)]
pub struct SimDetector {
    world: Arc<HiddenWorld>,
    cfg: SimDetectorConfig,
    seed: u64,
    totals: BTreeMap<String, u64>,
}

impl SimDetector {
    pub fn new(world: Arc<HiddenWorld>, cfg: SimDetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let totals = world.class_totals(&[Split::Seed, Split::Pool, Split::Validation]);
        Ok(Self {
            world,
            cfg,
            seed,
            totals,
        })
    }

    pub fn config(&self) -> &SimDetectorConfig {
        &self.cfg
    }

    /// Fraction of the hidden instances of `class` that are labeled.
    pub fn labeled_fraction(&self, summary: &TrainingSummary, class: &str) -> f64 {
        let total = self.totals.get(class).copied().unwrap_or(0);
        if total == 0 {
            return 0.0;
        }
        let labeled = summary.labeled_per_class.get(class).copied().unwrap_or(0);
        (labeled as f64 / total as f64).clamp(0.0, 1.0)
    }

    pub fn emission_probability(&self, summary: &TrainingSummary, class: &str) -> f64 {
        let f = self.labeled_fraction(summary, class);
        self.cfg.p_min + (self.cfg.p_max - self.cfg.p_min) * f
    }

    pub fn false_positive_rate(&self, background_labels: u64) -> f64 {
        self.cfg.fp_rate0 * (-self.cfg.fp_decay_beta * background_labels as f64).exp()
    }

    fn score<R: Rng>(params: (f64, f64), rng: &mut R) -> f64 {
        let beta = Beta::new(params.0, params.1).expect("validated parameters");
        beta.sample(rng).clamp(1e-6, 1.0 - 1e-6)
    }
}

impl Detector for SimDetector {
    fn detect(&self, image_id: &str, state: &ModelState) -> Result<Vec<Detection>> {
        let img = self.world.image(image_id)?;
        let (w, h) = img.record.extent();
        let base = rng::derive_path(self.seed, &[&state.tag, image_id]);
        let classes = &self.world.classes;
        let mut out = Vec::new();

        for o in &img.objects {
            let mut r = rng::stream(base, &["obj", &o.object_id]);
            let emit: f64 = r.random();
            let confuse: f64 = r.random();
            let other: usize = r.random_range(0..classes.len().max(1));
            let p = self.emission_probability(&state.summary, o.class_label.as_str());
            if emit >= p {
                continue;
            }
            let class_label = if confuse < self.cfg.class_confusion && classes.len() > 1 {
                let others: Vec<&String> = classes.iter().filter(|c| *c != o.class_label.as_str()).collect();
                ClassLabel::object(others[other % others.len()].clone())
            } else {
                o.class_label.clone()
            };
            let sx = self.cfg.box_jitter_sigma * o.bbox.width();
            let sy = self.cfg.box_jitter_sigma * o.bbox.height();
            let mut n = |s: f64| if s > 0.0 { Normal::new(0.0, s).expect("finite").sample(&mut r) } else { 0.0 };
            let (dx0, dy0, dx1, dy1) = (n(sx), n(sy), n(sx), n(sy));
            let bbox = BBox::new(
                o.bbox.x_min() + dx0,
                o.bbox.y_min() + dy0,
                o.bbox.x_max() + dx1,
                o.bbox.y_max() + dy1,
            )
            .and_then(|b| b.clip_to(w, h))
            .unwrap_or(o.bbox);
            let score = Self::score(self.cfg.true_score, &mut r);
            out.push(Detection {
                bbox,
                class_label,
                score,
            });
        }

        let rate = self.false_positive_rate(state.summary.background_labels);
        let u: f64 = rng::stream(base, &["fp-count"]).random();
        let n_fp = poisson_quantile(rate, u);
        let (lo, hi) = self.cfg.fp_size;
        for k in 0..n_fp {
            let mut r = rng::stream(base, &["fp", &k.to_string()]);
            let bw = r.random_range(lo..=hi).min(w);
            let bh = r.random_range(lo..=hi).min(h);
            let x = r.random_range(0.0..=(w - bw));
            let y = r.random_range(0.0..=(h - bh));
            let class = &classes[r.random_range(0..classes.len())];
            let score = Self::score(self.cfg.fp_score, &mut r);
            out.push(Detection {
                bbox: BBox::from_xywh(x, y, bw, bh)?,
                class_label: ClassLabel::object(class.clone()),
                score,
            });
        }
        Ok(out)
    }
}

/// Drops detections already covered by an existing, non-rejected annotation
/// of the same image, after greedy same-class self-deduplication (higher
/// score wins). Output is ordered by descending score.
pub fn filter_new(detections: &[Detection], existing: &[&Annotation], dedup_iou: f64) -> Vec<Detection> {
    let mut sorted: Vec<&Detection> = detections.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let dup = kept
            .iter()
            .any(|k| k.class_label == d.class_label && iou(&k.bbox, &d.bbox) >= dedup_iou);
        if !dup {
            kept.push(d.clone());
        }
    }
    kept.retain(|d| {
        !existing
            .iter()
            .filter(|a| a.state != AnnotationState::Rejected)
            .any(|a| iou(&a.bbox, &d.bbox) >= dedup_iou)
    });
    kept
}
