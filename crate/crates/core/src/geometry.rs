//! Axis-aligned box and point geometry shared by every other module.
//!
//! Boxes are stored in XYXY pixel coordinates with the origin at the top-left
//! corner of the image. Coordinates are real-valued: worker tools and
//! augmentation both produce fractional boxes.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max}): {reason}")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        reason: &'static str,
    },
    #[error("point ({x}, {y}) lies outside the {width}x{height} image")]
    OutOfBounds {
        x: f64,
        y: f64,
        width: f64,
        height: f64,
    },
    #[error("half extent must be positive and finite, got {0}")]
    BadExtent(f64),
    #[error("non-finite box delta")]
    NonFiniteDelta,
}

/// An axis-aligned rectangle with strictly positive area.
///
/// The invariant `x_min < x_max && y_min < y_max` (all finite) is enforced by
/// every constructor, so functions taking a `BBox` never see a degenerate box.
#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl TryFrom<RawBox> for BBox {
    type Error = GeometryError;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        BBox::new(raw.x_min, raw.y_min, raw.x_max, raw.y_max)
    }
}

impl From<BBox> for RawBox {
    fn from(b: BBox) -> Self {
        RawBox {
            x_min: b.x_min,
            y_min: b.y_min,
            x_max: b.x_max,
            y_max: b.y_max,
        }
    }
}

impl fmt::Debug for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BBox({}, {}, {}, {})",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let invalid = |reason| GeometryError::InvalidBox {
            x_min,
            y_min,
            x_max,
            y_max,
            reason,
        };
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite()) {
            return Err(invalid("non-finite coordinate"));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(invalid("non-positive area"));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from COCO-style `[x, y, width, height]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn to_xyxy(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    #[inline]
    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    #[inline]
    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    #[inline]
    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    #[inline]
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// The overlapping rectangle, if the boxes share positive area.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        BBox::new(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        )
        .ok()
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x_min <= other.x_min
            && self.y_min <= other.y_min
            && self.x_max >= other.x_max
            && self.y_max >= other.y_max
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Clips the box to `[0, width] x [0, height]`.
    ///
    /// A box that collapses to zero area is rejected rather than repaired.
    pub fn clip_to(&self, width: f64, height: f64) -> Result<BBox, GeometryError> {
        BBox::new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(width),
            self.y_max.min(height),
        )
    }

    /// Clips the box to another box.
    pub fn clip_within(&self, frame: &BBox) -> Result<BBox, GeometryError> {
        BBox::new(
            self.x_min.max(frame.x_min),
            self.y_min.max(frame.y_min),
            self.x_max.min(frame.x_max),
            self.y_max.min(frame.y_max),
        )
    }

    /// Grows the box by `dx` on the left and right and `dy` on the top and bottom.
    pub fn expand(&self, dx: f64, dy: f64) -> Result<BBox, GeometryError> {
        BBox::new(
            self.x_min - dx,
            self.y_min - dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<BBox, GeometryError> {
        BBox::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Result<BBox, GeometryError> {
        BBox::new(
            self.x_min * sx,
            self.y_min * sy,
            self.x_max * sx,
            self.y_max * sy,
        )
    }

    /// Mirrors the box about the vertical centre line of an image `width` wide.
    pub fn flip_horizontal(&self, width: f64) -> BBox {
        BBox {
            x_min: width - self.x_max,
            y_min: self.y_min,
            x_max: width - self.x_min,
            y_max: self.y_max,
        }
    }

    /// Mirrors the box about the horizontal centre line of an image `height` tall.
    pub fn flip_vertical(&self, height: f64) -> BBox {
        BBox {
            x_min: self.x_min,
            y_min: height - self.y_max,
            x_max: self.x_max,
            y_max: height - self.y_min,
        }
    }
}

/// Intersection over union of two boxes; symmetric, in `[0, 1]`, and exactly 1
/// only for identical boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// A legacy point annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dot {
    pub x: f64,
    pub y: f64,
    pub class_label: String,
}

/// Default half side, in pixels, of the square seeded around a dot.
pub const DEFAULT_HALF_EXTENT: f64 = 40.0;

/// Turns a dot into a square seed box of side `2 * half_extent`, clipped to
/// the image.
pub fn dot_to_seed_box(
    dot: &Dot,
    half_extent: f64,
    image_extent: (f64, f64),
) -> Result<BBox, GeometryError> {
    let (width, height) = image_extent;
    if !(half_extent.is_finite() && half_extent > 0.0) {
        return Err(GeometryError::BadExtent(half_extent));
    }
    let inside = dot.x.is_finite()
        && dot.y.is_finite()
        && dot.x >= 0.0
        && dot.y >= 0.0
        && dot.x <= width
        && dot.y <= height;
    if !inside {
        return Err(GeometryError::OutOfBounds {
            x: dot.x,
            y: dot.y,
            width,
            height,
        });
    }
    BBox::new(
        (dot.x - half_extent).max(0.0),
        (dot.y - half_extent).max(0.0),
        (dot.x + half_extent).min(width),
        (dot.y + half_extent).min(height),
    )
}

/// Box regression target relative to an anchor: centre offsets normalised by
/// the anchor size and log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta {
        tx: 0.0,
        ty: 0.0,
        tw: 0.0,
        th: 0.0,
    };

    pub fn from_array(v: [f64; 4]) -> Self {
        Self {
            tx: v[0],
            ty: v[1],
            tw: v[2],
            th: v[3],
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

pub fn encode_delta(anchor: &BBox, target: &BBox) -> BoxDelta {
    let (ax, ay) = anchor.center();
    let (gx, gy) = target.center();
    BoxDelta {
        tx: (gx - ax) / anchor.width(),
        ty: (gy - ay) / anchor.height(),
        tw: (target.width() / anchor.width()).ln(),
        th: (target.height() / anchor.height()).ln(),
    }
}

pub fn decode_delta(anchor: &BBox, delta: &BoxDelta) -> Result<BBox, GeometryError> {
    if !delta.is_finite() {
        return Err(GeometryError::NonFiniteDelta);
    }
    let (ax, ay) = anchor.center();
    let cx = ax + delta.tx * anchor.width();
    let cy = ay + delta.ty * anchor.height();
    let w = anchor.width() * delta.tw.exp();
    let h = anchor.height() * delta.th.exp();
    BBox::from_center(cx, cy, w, h)
}
