use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::geometry::BBox;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Each flip is applied with probability one half when enabled.
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub brightness_range: (f64, f64),
    /// Crop side as a fraction of the image side.
    pub crop_ratio_range: (f64, f64),
    /// Boxes keeping less than this fraction of their area after cropping
    /// are dropped.
    pub min_retained_area: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            horizontal_flip: true,
            vertical_flip: true,
            brightness_range: (0.8, 1.2),
            crop_ratio_range: (0.8, 1.0),
            min_retained_area: 0.25,
        }
    }
}

impl AugmentConfig {
    pub(super) fn validate(&self) -> Result<()> {
        let (b0, b1) = self.brightness_range;
        let (c0, c1) = self.crop_ratio_range;
        if !(b0 > 0.0 && b0 <= b1) || !(c0 > 0.0 && c0 <= c1 && c1 <= 1.0) {
            return Err(TrainError::InvalidConfig(
                "augmentation ranges must be ordered, positive, and crops at most 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_retained_area) {
            return Err(TrainError::InvalidConfig("min_retained_area must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// An image frame together with the transform that produced it from the
/// source image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub width: f64,
    pub height: f64,
    pub brightness: f64,
    pub source_width: f64,
    pub source_height: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    /// Top-left corner of the crop window in the flipped source frame.
    pub crop_origin: (f64, f64),
}

impl ImageMeta {
    pub fn new(width: f64, height: f64) -> Self {
        Self {
            width,
            height,
            brightness: 1.0,
            source_width: width,
            source_height: height,
            flip_h: false,
            flip_v: false,
            crop_origin: (0.0, 0.0),
        }
    }

    /// Maps a box in this frame back to source-image coordinates.
    pub fn to_source(&self, b: &BBox) -> BBox {
        let b = b
            .translate(self.crop_origin.0, self.crop_origin.1)
            .expect("translation keeps a valid box valid");
        let b = if self.flip_v { b.flip_vertical(self.source_height) } else { b };
        if self.flip_h {
            b.flip_horizontal(self.source_width)
        } else {
            b
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub brightness: f64,
    pub crop_ratio: f64,
    /// Crop origin as a fraction of the free margin on each axis.
    pub crop_offset: (f64, f64),
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        flip_h: false,
        flip_v: false,
        brightness: 1.0,
        crop_ratio: 1.0,
        crop_offset: (0.0, 0.0),
    };

    /// Flips, then crops, a source frame and its boxes. Returns the new frame
    /// and the surviving boxes with their input indices.
    pub fn apply(&self, source: (f64, f64), boxes: &[BBox], min_retained_area: f64) -> (ImageMeta, Vec<(usize, BBox)>) {
        let (w, h) = source;
        let cw = w * self.crop_ratio;
        let ch = h * self.crop_ratio;
        let origin = (self.crop_offset.0 * (w - cw), self.crop_offset.1 * (h - ch));
        let window = BBox::from_xywh(origin.0, origin.1, cw, ch).expect("crop window has positive area");
        let meta = ImageMeta {
            width: cw,
            height: ch,
            brightness: self.brightness,
            source_width: w,
            source_height: h,
            flip_h: self.flip_h,
            flip_v: self.flip_v,
            crop_origin: origin,
        };
        let kept = boxes
            .iter()
            .enumerate()
            .filter_map(|(i, b)| {
                let b = if self.flip_h { b.flip_horizontal(w) } else { *b };
                let b = if self.flip_v { b.flip_vertical(h) } else { b };
                let clipped = b.intersection(&window)?;
                if clipped.area() < min_retained_area * b.area() {
                    return None;
                }
                let moved = clipped.translate(-origin.0, -origin.1).ok()?.clip_to(cw, ch).ok()?;
                Some((i, moved))
            })
            .collect();
        (meta, kept)
    }
}

pub fn sample_augmentation(cfg: &AugmentConfig, seed: u64) -> AugmentParams {
    if !cfg.enabled {
        return AugmentParams::IDENTITY;
    }
    let mut rng = rng::stream(seed, &["augment"]);
    let flip_h = cfg.horizontal_flip && rng.random_bool(0.5);
    let flip_v = cfg.vertical_flip && rng.random_bool(0.5);
    let (b0, b1) = cfg.brightness_range;
    let (c0, c1) = cfg.crop_ratio_range;
    AugmentParams {
        flip_h,
        flip_v,
        brightness: if b0 < b1 { rng.random_range(b0..=b1) } else { b0 },
        crop_ratio: if c0 < c1 { rng.random_range(c0..=c1) } else { c0 },
        crop_offset: (rng.random(), rng.random()),
    }
}

/// Randomly flips, brightens and crops an image's boxes, deterministically
/// in `seed`. `meta` must describe an untransformed source image.
pub fn augment(meta: &ImageMeta, boxes: &[BBox], cfg: &AugmentConfig, seed: u64) -> (ImageMeta, Vec<(usize, BBox)>) {
    sample_augmentation(cfg, seed).apply((meta.width, meta.height), boxes, cfg.min_retained_area)
}
