//! Turning raw head maps into detections: per-anchor box decoding, score
//! thresholding, and per-class greedy non-maximum suppression.
//!
//! Decoding mirrors the loss encoding exactly: the center offset within a
//! cell goes through a sigmoid and the size channels are log-ratios against
//! the anchor. Logits are clamped to the same range the loss uses, so a
//! decoded score is always finite. Decoded corners are clamped to a small
//! margin around the unit square; boxes that collapse under that clamp are
//! dropped.

use crate::tensor::Tensor4;

use super::anchors::AnchorSet;
use super::loss::{self, slot, validate_heads, LOGIT_CLAMP};
use super::{iou, BBox, Detection, DetectorError, HeadLayout};

/// Detections scoring below this are dropped before suppression.
pub const SCORE_THRESH: f64 = 0.05;
/// Same-class boxes overlapping a kept box more than this are suppressed.
pub const NMS_IOU: f64 = 0.5;
/// Decoded corners are clamped to `[-CORNER_MARGIN, 1 + CORNER_MARGIN]`.
pub const CORNER_MARGIN: f64 = 0.25;

fn clamped_sigmoid(x: f64) -> f64 {
    loss::sigmoid(x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
}

/// Decodes every anchor cell of every scale into per-class scored boxes,
/// keeping those with `score >= score_thresh`. Returns one candidate list
/// per image, in (scale, anchor, row, col, class) order.
pub fn decode(
    heads: &[&Tensor4],
    anchors: &AnchorSet,
    layout: &HeadLayout,
    score_thresh: f64,
) -> Result<Vec<Vec<Detection>>, DetectorError> {
    let n_images = validate_heads(heads, layout)?;
    if anchors.num_scales() != layout.num_scales() {
        return Err(DetectorError::WrongCount {
            what: "anchor scales",
            expected: layout.num_scales(),
            got: anchors.num_scales(),
        });
    }
    for (scale, sizes) in (0..anchors.num_scales()).map(|s| (s, anchors.at(s))) {
        if sizes.len() != layout.anchors_per_scale[scale] {
            return Err(DetectorError::WrongCount {
                what: "anchors per scale",
                expected: layout.anchors_per_scale[scale],
                got: sizes.len(),
            });
        }
    }

    let k = layout.num_classes;
    let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); n_images];
    for (scale, head) in heads.iter().enumerate() {
        let shape = head.shape();
        let (rows, cols) = (shape.h, shape.w);
        for n in 0..n_images {
            for (a, &(aw, ah)) in anchors.at(scale).iter().enumerate() {
                for row in 0..rows {
                    for col in 0..cols {
                        let at = |offset: usize| {
                            head.data()[slot(shape, n, a, k, offset, row, col).base]
                        };
                        let cx = (col as f64 + clamped_sigmoid(at(0))) / cols as f64;
                        let cy = (row as f64 + clamped_sigmoid(at(1))) / rows as f64;
                        let w = aw * at(2).clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp();
                        let h = ah * at(3).clamp(-LOGIT_CLAMP, LOGIT_CLAMP).exp();
                        let clip = |v: f64| v.clamp(-CORNER_MARGIN, 1.0 + CORNER_MARGIN);
                        let (x0, y0) = (clip(cx - w / 2.0), clip(cy - h / 2.0));
                        let (x1, y1) = (clip(cx + w / 2.0), clip(cy + h / 2.0));
                        if x1 <= x0 || y1 <= y0 {
                            continue;
                        }
                        let bbox = BBox::from_corners(x0, y0, x1, y1)?;
                        let obj = clamped_sigmoid(at(4));
                        for class_id in 0..k {
                            let score = obj * clamped_sigmoid(at(5 + class_id));
                            if score >= score_thresh {
                                per_image[n].push(Detection { class_id, score, bbox });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(per_image)
}

/// Canonical detection order: score descending, then class, then position
/// (row-major: cy before cx), then size. Makes suppression and report output
/// independent of input ordering.
fn canonical_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.cy.total_cmp(&b.bbox.cy))
        .then(a.bbox.cx.total_cmp(&b.bbox.cx))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
}

/// Greedy per-class suppression: walk candidates in canonical order, keep a
/// box unless an already-kept box of the same class overlaps it with
/// IoU strictly above `iou_thresh`. The result is a subset of the input in
/// canonical order.
pub fn nms(candidates: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted: Vec<&Detection> = candidates.iter().collect();
    sorted.sort_by(|a, b| canonical_order(a, b));
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|kp| kp.class_id == d.class_id && iou(&kp.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(*d);
        }
    }
    kept
}

/// Decode followed by per-image suppression with the standard thresholds
/// baked into the signature's defaults.
pub fn decode_nms(
    heads: &[&Tensor4],
    anchors: &AnchorSet,
    layout: &HeadLayout,
    score_thresh: f64,
    iou_thresh: f64,
) -> Result<Vec<Vec<Detection>>, DetectorError> {
    Ok(decode(heads, anchors, layout, score_thresh)?
        .iter()
        .map(|cands| nms(cands, iou_thresh))
        .collect())
}
