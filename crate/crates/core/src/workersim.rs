//! Simulated crowd workers.
//!
//! A worker answers from what a real worker would have: the HIT as shown
//! (image, viewport, proposed box and class) and the image itself, which
//! here is the hidden world. Workers never see gold flags or annotation
//! states.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crowdgate::{HitView, SubtaskAnswer, SubtaskView, WorkerAnswer};
use crate::detector::{HiddenObject, HiddenWorld};
use crate::geometry::{iou, BBox};
use crate::labelstore::ClassLabel;
use crate::rng;

#[derive(Debug, Error)]
pub enum WorkerError {
    #[error("subtask {index} shows image {image_id}, which the simulated world does not contain")]
    UnknownImage { index: usize, image_id: String },
    #[error("invalid population config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Diligent,
    Careless,
    Spammer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub worker_id: String,
    pub archetype: Archetype,
    /// Edge noise as a fraction of object width/height.
    pub box_noise: f64,
    pub class_accuracy: f64,
    /// Probability of answering Background on a subtask showing no object.
    pub background_accuracy: f64,
    /// Probability of submitting a proposal unchanged.
    pub lazy_rate: f64,
}

impl WorkerProfile {
    pub fn diligent(worker_id: impl Into<String>) -> Self {
        Self {
            worker_id: worker_id.into(),
            archetype: Archetype::Diligent,
            box_noise: 0.042,
            class_accuracy: 0.95,
            background_accuracy: 0.9,
            lazy_rate: 0.0,
        }
    }

    pub fn careless(worker_id: impl Into<String>) -> Self {
        Self {
            worker_id: worker_id.into(),
            archetype: Archetype::Careless,
            box_noise: 0.06,
            class_accuracy: 0.8,
            background_accuracy: 0.6,
            lazy_rate: 0.3,
        }
    }

    pub fn spammer(worker_id: impl Into<String>) -> Self {
        Self {
            worker_id: worker_id.into(),
            archetype: Archetype::Spammer,
            box_noise: 0.0,
            class_accuracy: 0.0,
            background_accuracy: 0.0,
            lazy_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationConfig {
    pub size: usize,
    pub diligent: f64,
    pub careless: f64,
    pub spammer: f64,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            size: 20,
            diligent: 0.7,
            careless: 0.2,
            spammer: 0.1,
        }
    }
}

/// Builds a population with the configured mix. Counts are rounded, with
/// any remainder going to diligent workers; archetypes are shuffled across
/// worker ids by `seed`.
pub fn population(cfg: &PopulationConfig, seed: u64) -> Result<Vec<WorkerProfile>, WorkerError> {
    let fracs = [cfg.diligent, cfg.careless, cfg.spammer];
    if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(WorkerError::InvalidConfig("mix fractions must be in [0, 1] and sum to 1".into()));
    }
    let careless = (cfg.careless * cfg.size as f64).round() as usize;
    let spammer = (cfg.spammer * cfg.size as f64).round() as usize;
    if careless + spammer > cfg.size {
        return Err(WorkerError::InvalidConfig("mix exceeds population size".into()));
    }
    let mut kinds = vec![Archetype::Diligent; cfg.size - careless - spammer];
    kinds.extend(std::iter::repeat_n(Archetype::Careless, careless));
    kinds.extend(std::iter::repeat_n(Archetype::Spammer, spammer));
    kinds.shuffle(&mut rng::stream(seed, &["population"]));
    Ok(kinds
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let id = format!("w{:03}", i + 1);
            match k {
                Archetype::Diligent => WorkerProfile::diligent(id),
                Archetype::Careless => WorkerProfile::careless(id),
                Archetype::Spammer => WorkerProfile::spammer(id),
            }
        })
        .collect())
}

/// The hidden object a subtask is about: the best-overlapping object if it
/// reaches IoU 0.3, else the object containing the proposal centre whose
/// centre is nearest. `None` means the proposal shows no object.
pub fn locate_object<'a>(objects: &'a [HiddenObject], proposed: &BBox) -> Option<&'a HiddenObject> {
    let best = objects
        .iter()
        .map(|o| (iou(&o.bbox, proposed), o))
        .max_by(|a, b| a.0.total_cmp(&b.0));
    if let Some((v, o)) = best {
        if v >= 0.3 {
            return Some(o);
        }
    }
    let (cx, cy) = proposed.center();
    objects
        .iter()
        .filter(|o| o.bbox.contains_point(cx, cy))
        .min_by(|a, b| {
            let d = |o: &HiddenObject| {
                let (ox, oy) = o.bbox.center();
                (ox - cx).powi(2) + (oy - cy).powi(2)
            };
            d(a).total_cmp(&d(b))
        })
}

fn noisy_box<R: Rng>(truth: &BBox, noise: f64, extent: (f64, f64), rng: &mut R) -> BBox {
    if noise <= 0.0 {
        return *truth;
    }
    let nx = Normal::new(0.0, noise * truth.width()).expect("finite");
    let ny = Normal::new(0.0, noise * truth.height()).expect("finite");
    BBox::new(
        truth.x_min() + nx.sample(rng),
        truth.y_min() + ny.sample(rng),
        truth.x_max() + nx.sample(rng),
        truth.y_max() + ny.sample(rng),
    )
    .and_then(|b| b.clip_to(extent.0, extent.1))
    .unwrap_or(*truth)
}

fn random_box_in<R: Rng>(v: &BBox, rng: &mut R) -> BBox {
    loop {
        let (a, b) = (rng.random_range(v.x_min()..=v.x_max()), rng.random_range(v.x_min()..=v.x_max()));
        let (c, d) = (rng.random_range(v.y_min()..=v.y_max()), rng.random_range(v.y_min()..=v.y_max()));
        if let Ok(bx) = BBox::new(a.min(b), c.min(d), a.max(b), c.max(d)) {
            return bx;
        }
    }
}

fn answer_subtask<R: Rng>(
    profile: &WorkerProfile,
    s: &SubtaskView,
    world: &HiddenWorld,
    rng: &mut R,
) -> Result<SubtaskAnswer, WorkerError> {
    let img = world.images.get(&s.image_id).ok_or_else(|| WorkerError::UnknownImage {
        index: s.index,
        image_id: s.image_id.clone(),
    })?;
    let classes: Vec<ClassLabel> = world.classes.iter().map(ClassLabel::object).collect();
    let unchanged = SubtaskAnswer {
        adjusted_box: s.proposed_box,
        selected_class: s.proposed_class.clone(),
    };

    if profile.archetype == Archetype::Spammer {
        let pick = rng.random_range(0..=classes.len());
        return Ok(SubtaskAnswer {
            adjusted_box: random_box_in(&s.crop_viewport, rng),
            selected_class: classes.get(pick).cloned().unwrap_or(ClassLabel::Background),
        });
    }

    let lazy = rng.random_bool(profile.lazy_rate.clamp(0.0, 1.0));
    let class_roll: f64 = rng.random();
    let other: usize = rng.random_range(0..classes.len().max(1));
    if lazy {
        return Ok(unchanged);
    }
    match locate_object(&img.objects, &s.proposed_box) {
        Some(obj) => {
            let selected_class = if class_roll < profile.class_accuracy || classes.len() < 2 {
                obj.class_label.clone()
            } else {
                let wrong: Vec<&ClassLabel> = classes.iter().filter(|c| **c != obj.class_label).collect();
                wrong[other % wrong.len()].clone()
            };
            Ok(SubtaskAnswer {
                adjusted_box: noisy_box(&obj.bbox, profile.box_noise, img.record.extent(), rng),
                selected_class,
            })
        }
        None if class_roll < profile.background_accuracy => Ok(SubtaskAnswer {
            adjusted_box: s.proposed_box,
            selected_class: ClassLabel::Background,
        }),
        None => Ok(unchanged),
    }
}

/// Answers every subtask of a leased HIT. Deterministic in `seed`.
pub fn answer_hit(
    profile: &WorkerProfile,
    hit: &HitView,
    world: &HiddenWorld,
    seed: u64,
) -> Result<WorkerAnswer, WorkerError> {
    let mut rng = rng::stream(seed, &["answer", &profile.worker_id, &hit.hit_id]);
    let subtasks = hit
        .subtasks
        .iter()
        .map(|s| answer_subtask(profile, s, world, &mut rng))
        .collect::<Result<_, _>>()?;
    Ok(WorkerAnswer { subtasks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_mix_is_14_4_2() {
        let pop = population(&PopulationConfig::default(), 1).unwrap();
        let count = |a| pop.iter().filter(|p| p.archetype == a).count();
        assert_eq!(
            (count(Archetype::Diligent), count(Archetype::Careless), count(Archetype::Spammer)),
            (14, 4, 2)
        );
    }

    #[test]
    fn bad_mix_is_rejected() {
        let cfg = PopulationConfig {
            diligent: 0.5,
            ..PopulationConfig::default()
        };
        assert!(population(&cfg, 1).is_err());
    }

    #[test]
    fn locating_prefers_overlap_then_containment() {
        let o = |id: &str, x0, y0, x1, y1| HiddenObject {
            object_id: id.into(),
            class_label: ClassLabel::object("Rockfish"),
            bbox: BBox::new(x0, y0, x1, y1).unwrap(),
        };
        let objs = [o("big", 0.0, 0.0, 200.0, 200.0), o("small", 90.0, 90.0, 110.0, 110.0)];
        let p = BBox::new(88.0, 88.0, 112.0, 112.0).unwrap();
        assert_eq!(locate_object(&objs, &p).unwrap().object_id, "small");
        let tiny = BBox::new(10.0, 10.0, 12.0, 12.0).unwrap();
        assert_eq!(locate_object(&objs, &tiny).unwrap().object_id, "big");
        let outside = BBox::new(300.0, 300.0, 310.0, 310.0).unwrap();
        assert!(locate_object(&objs, &outside).is_none());
    }
}
