//! Minimal single-shot detection stack.
//!
//! A tiny staged backbone feeds the feature pyramid; per-scale 1x1 heads
//! predict anchor offsets, objectness, and class logits; matching, loss,
//! decoding with NMS, and average-precision evaluation make the pyramid's
//! effect on detection measurable. Boxes everywhere are center-size
//! fractions of the image side.

pub mod anchors;
pub mod backbone;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod predict;

use thiserror::Error;

use crate::pyramid::PyramidError;
use crate::tensor::TensorError;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum DetectorError {
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error("box must have positive finite dims, got w={w}, h={h}")]
    BadBoxDims { w: f64, h: f64 },
    #[error("box center must be finite and inside [0,1], got cx={cx}, cy={cy}")]
    BadBoxCenter { cx: f64, cy: f64 },
    #[error("box extends outside the image: cx={cx}, cy={cy}, w={w}, h={h}")]
    BoxOutOfBounds { cx: f64, cy: f64, w: f64, h: f64 },
    #[error("class id {class} is outside 0..{classes}")]
    BadClass { class: usize, classes: usize },
    #[error("head at scale {scale} needs {expected} channels for this anchor/class layout, got {got}")]
    HeadLayout {
        scale: usize,
        expected: usize,
        got: usize,
    },
    #[error("expected {expected} {what}, got {got}")]
    WrongCount {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("backbone pooling needs power-of-two strides, got {stride}")]
    BackboneStride { stride: usize },
    #[error("loss is non-finite")]
    NonFiniteLoss,
}

impl From<TensorError> for DetectorError {
    fn from(e: TensorError) -> Self {
        DetectorError::Pyramid(PyramidError::Tensor(e))
    }
}

/// How a head tensor's channels are laid out: per anchor, the five box and
/// objectness slots `(tx, ty, tw, th, obj)` followed by one logit per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub anchors_per_scale: Vec<usize>,
    pub num_classes: usize,
}

impl HeadLayout {
    pub fn channels(&self, scale: usize) -> usize {
        self.anchors_per_scale[scale] * (5 + self.num_classes)
    }

    pub fn num_scales(&self) -> usize {
        self.anchors_per_scale.len()
    }
}

/// Axis-aligned box in center-size form. Construction enforces positive,
/// finite dims; centers may lie slightly outside the unit square (decoded
/// boxes are clamped to [-0.25, 1.25]).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<BBox, DetectorError> {
        if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
            return Err(DetectorError::BadBoxDims { w, h });
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(DetectorError::BadBoxCenter { cx, cy });
        }
        Ok(BBox { cx, cy, w, h })
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<BBox, DetectorError> {
        BBox::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection-over-union of two valid boxes: 0 when disjoint, 1 when
/// identical, symmetric, always in [0, 1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    // Areas come from the same corner differences as the intersection so
    // that identical boxes yield exactly 1 regardless of rounding.
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// IoU of two box *shapes* ignoring position: the boxes are compared as if
/// concentric. Used to pick which anchor shape fits a ground truth best.
pub fn shape_iou(aw: f64, ah: f64, bw: f64, bh: f64) -> f64 {
    let inter = aw.min(bw) * ah.min(bh);
    let union = aw * ah + bw * bh - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// A labeled object: class index plus its box, fully inside the unit square.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

impl GroundTruth {
    /// Validates the class range and that the box lies inside the image.
    pub fn new(class_id: usize, bbox: BBox, num_classes: usize) -> Result<Self, DetectorError> {
        if class_id >= num_classes {
            return Err(DetectorError::BadClass {
                class: class_id,
                classes: num_classes,
            });
        }
        let (x0, y0, x1, y1) = bbox.corners();
        if x0 < 0.0 || y0 < 0.0 || x1 > 1.0 || y1 > 1.0 {
            return Err(DetectorError::BoxOutOfBounds {
                cx: bbox.cx,
                cy: bbox.cy,
                w: bbox.w,
                h: bbox.h,
            });
        }
        Ok(GroundTruth { class_id, bbox })
    }
}

/// One decoded, scored box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}
