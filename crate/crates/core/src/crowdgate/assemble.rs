use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{CrowdConfig, CrowdError, Hit, Result, SubTask, SubtaskKind};
use crate::geometry::BBox;
use crate::labelstore::Annotation;
use crate::rng;

/// The zoomed region shown around a proposed box: the box scaled about its
/// centre by `scale`, clipped to the image.
pub fn viewport_for(proposed: &BBox, scale: f64, extent: (f64, f64)) -> BBox {
    let dx = 0.5 * (scale - 1.0).max(0.0) * proposed.width();
    let dy = 0.5 * (scale - 1.0).max(0.0) * proposed.height();
    proposed
        .expand(dx, dy)
        .and_then(|v| v.clip_to(extent.0, extent.1))
        .unwrap_or(*proposed)
}

fn jitter<R: Rng>(truth: &BBox, frac: f64, extent: (f64, f64), rng: &mut R) -> BBox {
    if frac <= 0.0 {
        return *truth;
    }
    let nx = Normal::new(0.0, frac * truth.width()).expect("finite sigma");
    let ny = Normal::new(0.0, frac * truth.height()).expect("finite sigma");
    let cand = BBox::new(
        truth.x_min() + nx.sample(rng),
        truth.y_min() + ny.sample(rng),
        truth.x_max() + nx.sample(rng),
        truth.y_max() + ny.sample(rng),
    )
    .and_then(|b| b.clip_to(extent.0, extent.1));
    cand.unwrap_or(*truth)
}

/// Groups `pending` annotations into HITs of `cfg.hit_size - 1` real subtasks
/// plus one gold subtask drawn uniformly from `gold_pool`, placed last.
///
/// A short final group is padded with filler subtasks drawn from the gold
/// pool. Hit ids are `hit-<n>`, `n` zero-padded to six digits and taken
/// from `next_id`.
pub fn assemble_hits(
    pending: &[&Annotation],
    gold_pool: &[&Annotation],
    extent_of: &dyn Fn(&str) -> Option<(f64, f64)>,
    cfg: &CrowdConfig,
    seed: u64,
    next_id: &mut u64,
) -> Result<Vec<Hit>> {
    if pending.is_empty() {
        return Ok(Vec::new());
    }
    if gold_pool.is_empty() {
        return Err(CrowdError::NoGold);
    }
    if cfg.hit_size < 2 {
        return Err(CrowdError::MalformedHit("hit_size must be at least 2".into()));
    }
    let mut rng = rng::stream(seed, &["assemble"]);
    let extent = |image_id: &str| {
        extent_of(image_id).ok_or_else(|| CrowdError::UnknownImage(image_id.to_string()))
    };

    let gold_subtask = |ann: &Annotation, kind, rng: &mut rand_chacha::ChaCha8Rng| -> Result<SubTask> {
        let ext = extent(&ann.image_id)?;
        let proposed = jitter(&ann.bbox, cfg.gold_proposal_jitter, ext, rng);
        Ok(SubTask {
            ann_id: ann.ann_id.clone(),
            image_id: ann.image_id.clone(),
            crop_viewport: viewport_for(&proposed, cfg.viewport_scale, ext),
            proposed_box: proposed,
            proposed_class: ann.class_label.clone(),
            kind,
            truth: Some((ann.class_label.clone(), ann.bbox)),
        })
    };

    let per_hit = cfg.hit_size - 1;
    let mut hits = Vec::with_capacity(pending.len().div_ceil(per_hit));
    for group in pending.chunks(per_hit) {
        let mut subtasks = Vec::with_capacity(cfg.hit_size);
        for ann in group {
            let ext = extent(&ann.image_id)?;
            subtasks.push(SubTask {
                ann_id: ann.ann_id.clone(),
                image_id: ann.image_id.clone(),
                crop_viewport: viewport_for(&ann.bbox, cfg.viewport_scale, ext),
                proposed_box: ann.bbox,
                proposed_class: ann.class_label.clone(),
                kind: SubtaskKind::Real,
                truth: None,
            });
        }
        while subtasks.len() < per_hit {
            let filler = *gold_pool.choose(&mut rng).expect("non-empty gold pool");
            subtasks.push(gold_subtask(filler, SubtaskKind::Filler, &mut rng)?);
        }
        let gold = *gold_pool.choose(&mut rng).expect("non-empty gold pool");
        subtasks.push(gold_subtask(gold, SubtaskKind::Gold, &mut rng)?);
        *next_id += 1;
        hits.push(Hit::new(format!("hit-{:06}", *next_id), subtasks)?);
    }
    Ok(hits)
}
