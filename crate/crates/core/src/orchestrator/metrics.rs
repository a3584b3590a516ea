use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::labelstore::ClassLabel;

/// A scored detection placed on an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalDetection {
    pub image_id: String,
    pub class_label: ClassLabel,
    pub bbox: BBox,
    pub score: f64,
}

/// A reference box: a hidden-world object or a held-out label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTruth {
    pub id: String,
    pub image_id: String,
    pub class_label: ClassLabel,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ApReport {
    pub per_class: BTreeMap<String, f64>,
    /// Unweighted mean over classes with at least one truth.
    pub map: Option<f64>,
}

/// Marks each detection (in descending score order) as true or false
/// positive. A detection is a true positive when its best-overlapping truth of
/// the same class and image reaches `iou_thresh` and is still unmatched.
fn match_detections<'a>(
    detections: &[&'a EvalDetection],
    truths: &[&EvalTruth],
    iou_thresh: f64,
) -> Vec<(&'a EvalDetection, bool)> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut by_image: BTreeMap<&str, Vec<(usize, &EvalTruth)>> = BTreeMap::new();
    for (i, t) in truths.iter().enumerate() {
        by_image.entry(t.image_id.as_str()).or_default().push((i, t));
    }
    let mut matched = vec![false; truths.len()];
    sorted
        .into_iter()
        .map(|d| {
            let best = by_image
                .get(d.image_id.as_str())
                .into_iter()
                .flatten()
                .filter(|(_, t)| t.class_label == d.class_label)
                .map(|(i, t)| (*i, iou(&d.bbox, &t.bbox)))
                .max_by(|a, b| a.1.total_cmp(&b.1));
            let tp = match best {
                Some((i, v)) if v >= iou_thresh && !matched[i] => {
                    matched[i] = true;
                    true
                }
                _ => false,
            };
            (d, tp)
        })
        .collect()
}

/// All-point interpolated average precision for one class.
fn class_ap(detections: &[&EvalDetection], truths: &[&EvalTruth], iou_thresh: f64) -> f64 {
    let marks = match_detections(detections, truths, iou_thresh);
    let n = truths.len() as f64;
    let mut tp = 0.0;
    let mut points = Vec::with_capacity(marks.len());
    for (k, (_, hit)) in marks.iter().enumerate() {
        if *hit {
            tp += 1.0;
        }
        points.push((tp / n, tp / (k + 1) as f64));
    }
    // precision envelope, right to left
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

pub fn average_precision(detections: &[EvalDetection], truths: &[EvalTruth], iou_thresh: f64) -> ApReport {
    let mut classes: BTreeSet<&ClassLabel> = truths.iter().map(|t| &t.class_label).collect();
    for d in detections {
        if !classes.contains(&d.class_label) {
            log::warn!("class {} has no reference boxes; AP undefined, excluded from mAP", d.class_label);
        }
    }
    classes.retain(|c| !c.is_background());
    let mut per_class = BTreeMap::new();
    for class in classes {
        let dets: Vec<&EvalDetection> = detections.iter().filter(|d| &d.class_label == class).collect();
        let ts: Vec<&EvalTruth> = truths.iter().filter(|t| &t.class_label == class).collect();
        per_class.insert(class.to_string(), class_ap(&dets, &ts, iou_thresh));
    }
    let map = (!per_class.is_empty()).then(|| per_class.values().sum::<f64>() / per_class.len() as f64);
    ApReport { per_class, map }
}

/// Per-class precision of detections scoring at least `min_score`. Classes
/// with no such detections map to `None`.
pub fn precision_by_class(
    detections: &[EvalDetection],
    truths: &[EvalTruth],
    classes: &[String],
    iou_thresh: f64,
    min_score: f64,
) -> BTreeMap<String, Option<f64>> {
    classes
        .iter()
        .map(|c| {
            let label = ClassLabel::object(c.clone());
            let dets: Vec<&EvalDetection> = detections
                .iter()
                .filter(|d| d.class_label == label && d.score >= min_score)
                .collect();
            let ts: Vec<&EvalTruth> = truths.iter().filter(|t| t.class_label == label).collect();
            let marks = match_detections(&dets, &ts, iou_thresh);
            let p = (!marks.is_empty())
                .then(|| marks.iter().filter(|(_, tp)| *tp).count() as f64 / marks.len() as f64);
            (c.clone(), p)
        })
        .collect()
}

/// Ids of truths covered by a label of the same class at `iou_thresh`, with
/// one-to-one matching in descending IoU order.
pub fn matched_truths(labels: &[EvalTruth], truths: &[EvalTruth], iou_thresh: f64) -> BTreeSet<String> {
    let mut pairs = Vec::new();
    for (ti, t) in truths.iter().enumerate() {
        for (li, l) in labels.iter().enumerate() {
            if l.image_id == t.image_id && l.class_label == t.class_label {
                let v = iou(&l.bbox, &t.bbox);
                if v >= iou_thresh {
                    pairs.push((v, ti, li));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_t = vec![false; truths.len()];
    let mut used_l = vec![false; labels.len()];
    let mut out = BTreeSet::new();
    for (_, ti, li) in pairs {
        if !used_t[ti] && !used_l[li] {
            used_t[ti] = true;
            used_l[li] = true;
            out.insert(truths[ti].id.clone());
        }
    }
    out
}

/// True once the last `patience` delta ratios are all below `epsilon`.
pub fn has_converged(delta_ratios: &[f64], epsilon: f64, patience: usize) -> bool {
    let patience = patience.max(1);
    delta_ratios.len() >= patience && delta_ratios[delta_ratios.len() - patience..].iter().all(|r| *r < epsilon)
}
