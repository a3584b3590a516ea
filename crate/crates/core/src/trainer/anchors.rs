use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{AnchorRole, AnchorSample, Result, TrainConfig, TrainError};
use crate::geometry::{encode_delta, iou, BBox};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    pub stride: f64,
    /// Anchor side lengths (square-root of area), in pixels.
    pub sizes: Vec<f64>,
    /// Height-to-width ratios.
    pub ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            stride: 16.0,
            sizes: vec![48.0, 96.0, 160.0],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorConfig {
    pub(super) fn validate(&self) -> Result<()> {
        let positive = |xs: &[f64]| !xs.is_empty() && xs.iter().all(|v| v.is_finite() && *v > 0.0);
        if !(self.stride > 0.0) || !positive(&self.sizes) || !positive(&self.ratios) {
            return Err(TrainError::InvalidConfig(
                "anchor stride, sizes and ratios must be positive and non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Anchors centred on a regular grid, one per size and ratio at each grid
/// point, clipped to the image. Order is row-major over the grid, then
/// sizes, then ratios.
pub fn generate_anchors(extent: (f64, f64), cfg: &AnchorConfig) -> Vec<BBox> {
    let (w, h) = extent;
    let mut out = Vec::new();
    let mut cy = cfg.stride / 2.0;
    while cy < h {
        let mut cx = cfg.stride / 2.0;
        while cx < w {
            for &size in &cfg.sizes {
                for &ratio in &cfg.ratios {
                    let aw = size / ratio.sqrt();
                    let ah = size * ratio.sqrt();
                    if let Ok(b) = BBox::from_center(cx, cy, aw, ah).and_then(|b| b.clip_to(w, h)) {
                        out.push(b);
                    }
                }
            }
            cx += cfg.stride;
        }
        cy += cfg.stride;
    }
    out
}

/// Assigns a role to every anchor and draws the minibatch.
///
/// Returns one sample per anchor, in anchor order. At most
/// `N * positive_fraction` positives are kept; the rest of the minibatch is
/// filled with every labeled-background anchor first and then random
/// negatives. Candidates left out of the minibatch are marked `Unused`.
pub fn match_and_sample(
    anchors: &[BBox],
    objects: &[BBox],
    background: &[BBox],
    scores: &[f64],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<AnchorSample>> {
    if scores.len() != anchors.len() {
        return Err(TrainError::LengthMismatch {
            anchors: anchors.len(),
            other: scores.len(),
            what: "scores",
        });
    }
    let n = anchors.len();
    let mut best_obj = vec![(0.0f64, usize::MAX); n];
    let mut best_bg = vec![0.0f64; n];
    let mut per_object_best = vec![(0.0f64, usize::MAX); objects.len()];
    for (a, anchor) in anchors.iter().enumerate() {
        for (m, obj) in objects.iter().enumerate() {
            let v = iou(anchor, obj);
            if v > best_obj[a].0 {
                best_obj[a] = (v, m);
            }
            if v > per_object_best[m].0 {
                per_object_best[m] = (v, a);
            }
        }
        for bg in background {
            best_bg[a] = best_bg[a].max(iou(anchor, bg));
        }
    }

    let mut target: Vec<Option<usize>> = best_obj
        .iter()
        .map(|&(v, m)| (v >= cfg.match_iou_pos).then_some(m))
        .collect();
    for (m, &(v, a)) in per_object_best.iter().enumerate() {
        if v > 0.0 && target[a].is_none() {
            target[a] = Some(m);
        }
    }

    let mut samples: Vec<AnchorSample> = (0..n)
        .map(|a| {
            let role = if target[a].is_some() {
                AnchorRole::PositiveI
            } else if best_bg[a] >= cfg.match_iou_pos {
                AnchorRole::LabeledBackgroundJ
            } else if cfg.ignore_rule && scores[a] > cfg.ignore_threshold {
                AnchorRole::Ignored
            } else if best_obj[a].0.max(best_bg[a]) < cfg.match_iou_neg {
                AnchorRole::NegativeK
            } else {
                AnchorRole::Unused
            };
            let mut s = AnchorSample::new(a, role, scores[a]);
            if let Some(m) = target[a] {
                s.t_star = Some(encode_delta(&anchors[a], &objects[m]));
            }
            s
        })
        .collect();

    let mut rng = rng::stream(seed, &["minibatch"]);
    let of_role = |samples: &[AnchorSample], role| -> Vec<usize> {
        samples.iter().filter(|s| s.role == role).map(|s| s.anchor).collect()
    };
    let mut keep = |candidates: Vec<usize>, capacity: usize, samples: &mut [AnchorSample]| -> usize {
        if candidates.len() <= capacity {
            return candidates.len();
        }
        let mut chosen = vec![false; candidates.len()];
        for i in index::sample(&mut rng, candidates.len(), capacity) {
            chosen[i] = true;
        }
        for (a, keep) in candidates.into_iter().zip(chosen) {
            if !keep {
                samples[a].role = AnchorRole::Unused;
                samples[a].t_star = None;
            }
        }
        capacity
    };

    let cap = cfg.minibatch_size;
    let positives = of_role(&samples, AnchorRole::PositiveI);
    if positives.is_empty() {
        log::warn!("no positive anchors; training on negatives only");
    }
    let max_pos = ((cap as f64) * cfg.positive_fraction).floor() as usize;
    let used = keep(positives, max_pos, &mut samples);
    let bg = of_role(&samples, AnchorRole::LabeledBackgroundJ);
    let used = used + keep(bg, cap - used, &mut samples);
    let neg = of_role(&samples, AnchorRole::NegativeK);
    keep(neg, cap - used, &mut samples);
    Ok(samples)
}
