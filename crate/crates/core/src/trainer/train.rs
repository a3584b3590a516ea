use std::io::Write;

use serde::{Deserialize, Serialize};

use super::augment::sample_augmentation;
use super::{
    generate_anchors, loss_gradient, match_and_sample, AnchorRole, ImageMeta, LossBreakdown, Result,
    ScoringModel, TrainConfig, TrainError,
};
use crate::geometry::BBox;
use crate::rng;

/// Supplies model inputs for anchors of a (possibly augmented) image.
pub trait FeatureProvider {
    fn feature_dim(&self) -> usize;
    /// One feature vector per anchor; anchors are in `meta`'s frame.
    fn features(&self, image_id: &str, meta: &ImageMeta, anchors: &[BBox]) -> Vec<Vec<f64>>;
}

/// One training image: verified object boxes and confirmed background boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainImage {
    pub image_id: String,
    pub extent: (f64, f64),
    pub objects: Vec<BBox>,
    pub background: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOutcome {
    /// Loss before each epoch's update, averaged over images.
    pub trace: Vec<LossBreakdown>,
    /// Ignored anchors seen across all epochs.
    pub ignored_anchors: usize,
    /// Summed gradient contribution of every ignored anchor.
    pub ignored_contribution: f64,
    /// Mean objectness over positive anchors in the last epoch.
    pub final_positive_mean_p: Option<f64>,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f64> {
        self.trace.last().map(|l| l.total)
    }
}

/// Full-batch gradient descent over `epochs` passes. Each pass augments
/// every image afresh, re-matches anchors under the current model and steps
/// along the image-averaged gradient.
pub fn train_epochs<M: ScoringModel + Clone>(
    model: &mut M,
    images: &[TrainImage],
    provider: &dyn FeatureProvider,
    cfg: &TrainConfig,
    epochs: usize,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if provider.feature_dim() != model.feature_dim() {
        return Err(TrainError::InvalidConfig(format!(
            "provider yields {} features, model expects {}",
            provider.feature_dim(),
            model.feature_dim()
        )));
    }
    let mut out = TrainOutcome::default();
    if epochs == 0 {
        return Ok(out);
    }
    if images.iter().all(|i| i.objects.is_empty()) {
        return Err(TrainError::NoLabels);
    }
    let np = model.params().len();
    let scale = 1.0 / images.len() as f64;
    let mut pos_p = (0.0, 0usize);
    for epoch in 0..epochs {
        let mut grad = vec![0.0; np];
        let mut epoch_loss = LossBreakdown::default();
        for (i, img) in images.iter().enumerate() {
            let s = rng::derive_path(seed, &[&epoch.to_string(), &i.to_string()]);
            let params = sample_augmentation(&cfg.augmentation, s);
            let min_area = cfg.augmentation.min_retained_area;
            let (meta, objects) = params.apply(img.extent, &img.objects, min_area);
            let (_, background) = params.apply(img.extent, &img.background, min_area);
            let objects: Vec<BBox> = objects.into_iter().map(|(_, b)| b).collect();
            let background: Vec<BBox> = background.into_iter().map(|(_, b)| b).collect();

            let anchors = generate_anchors((meta.width, meta.height), &cfg.anchors);
            let features = provider.features(&img.image_id, &meta, &anchors);
            if features.len() != anchors.len() {
                return Err(TrainError::LengthMismatch {
                    anchors: anchors.len(),
                    other: features.len(),
                    what: "feature vectors",
                });
            }
            let scores: Vec<f64> = features.iter().map(|x| model.forward(x).0).collect();
            let samples: Vec<_> = match_and_sample(&anchors, &objects, &background, &scores, cfg, s)?
                .into_iter()
                .filter(|s| s.role != AnchorRole::Unused)
                .collect();
            let report = loss_gradient(model, &features, &samples, cfg)?;
            for (s, c) in samples.iter().zip(&report.contributions) {
                match s.role {
                    AnchorRole::Ignored => {
                        out.ignored_anchors += 1;
                        out.ignored_contribution += c;
                    }
                    AnchorRole::PositiveI if epoch + 1 == epochs => {
                        pos_p.0 += scores[s.anchor];
                        pos_p.1 += 1;
                    }
                    _ => {}
                }
            }
            for (g, r) in grad.iter_mut().zip(&report.grad) {
                *g += scale * r;
            }
            epoch_loss.cls_i += scale * report.loss.cls_i;
            epoch_loss.cls_j += scale * report.loss.cls_j;
            epoch_loss.cls_k += scale * report.loss.cls_k;
            epoch_loss.reg += scale * report.loss.reg;
        }
        epoch_loss.total = epoch_loss.recomputed_total();
        if !epoch_loss.total.is_finite() || epoch_loss.total > cfg.divergence_limit {
            return Err(TrainError::Diverged {
                epoch,
                loss: epoch_loss.total,
            });
        }
        out.trace.push(epoch_loss);
        for (p, g) in model.params_mut().iter_mut().zip(&grad) {
            *p -= cfg.learning_rate * g;
        }
    }
    out.final_positive_mean_p = (pos_p.1 > 0).then(|| pos_p.0 / pos_p.1 as f64);
    Ok(out)
}

/// Writes `epoch,loss,cls_i,cls_j,cls_k,reg` rows.
pub fn write_loss_trace<W: Write>(w: W, trace: &[LossBreakdown]) -> std::result::Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["epoch", "loss", "cls_i", "cls_j", "cls_k", "reg"])?;
    for (epoch, l) in trace.iter().enumerate() {
        wr.write_record(&[
            epoch.to_string(),
            l.total.to_string(),
            l.cls_i.to_string(),
            l.cls_j.to_string(),
            l.cls_k.to_string(),
            l.reg.to_string(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
