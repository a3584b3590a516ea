use std::sync::Arc;

use super::HiddenWorld;
use crate::geometry::{iou, BBox};
use crate::rng;
use crate::trainer::{FeatureProvider, ImageMeta};

/// Anchor features rendered from the hidden world: a bias, the anchor's best
/// overlap with any true object (what the image actually shows), the
/// brightness offset and a small deterministic texture term.
#[derive(Debug, Clone)]
pub struct SimFeatures {
    world: Arc<HiddenWorld>,
    pub texture_amplitude: f64,
}

impl SimFeatures {
    pub fn new(world: Arc<HiddenWorld>) -> Self {
        Self {
            world,
            texture_amplitude: 0.1,
        }
    }
}

impl FeatureProvider for SimFeatures {
    fn feature_dim(&self) -> usize {
        4
    }

    fn features(&self, image_id: &str, meta: &ImageMeta, anchors: &[BBox]) -> Vec<Vec<f64>> {
        let objects = self
            .world
            .images
            .get(image_id)
            .map(|i| i.objects.as_slice())
            .unwrap_or(&[]);
        anchors
            .iter()
            .map(|a| {
                let src = meta.to_source(a);
                let evidence = objects.iter().map(|o| iou(&src, &o.bbox)).fold(0.0, f64::max);
                let key = format!("{image_id}:{:.1}:{:.1}:{:.1}:{:.1}", src.x_min(), src.y_min(), src.x_max(), src.y_max());
                let h = rng::derive(0, key) as f64 / u64::MAX as f64;
                let texture = self.texture_amplitude * (2.0 * h - 1.0);
                vec![1.0, evidence * meta.brightness, meta.brightness - 1.0, texture]
            })
            .collect()
    }
}
