//! Anchor shapes and the ground-truth assignment rule.
//!
//! Every feature-map cell carries the scale's anchor shapes. A ground truth
//! is assigned to the (scale, cell, anchor) whose anchor *shape* fits it
//! best (the cell is the one containing the box center; shape ties go to
//! the lower scale, then the lower anchor index). Additionally, any placed
//! anchor whose box overlaps some ground truth with IoU > 0.5 is positive.
//! When two ground truths claim one slot, the higher placed-box IoU wins,
//! then the earlier ground truth.

use super::{iou, shape_iou, BBox, DetectorError, GroundTruth};
use crate::pyramid::PyramidConfig;

/// Per-scale anchor sizes as fractions of the image side.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    sizes: Vec<Vec<(f64, f64)>>,
}

impl AnchorSet {
    pub fn new(sizes: Vec<Vec<(f64, f64)>>) -> Result<AnchorSet, DetectorError> {
        for per_scale in &sizes {
            if per_scale.is_empty() {
                return Err(DetectorError::WrongCount {
                    what: "anchors per scale (at least one)",
                    expected: 1,
                    got: 0,
                });
            }
            for &(w, h) in per_scale {
                if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
                    return Err(DetectorError::BadBoxDims { w, h });
                }
            }
        }
        Ok(AnchorSet { sizes })
    }

    /// Three square anchors per scale, sized 0.5x, 1x, and 2x the scale's
    /// stride in pixels.
    pub fn standard(cfg: &PyramidConfig, image_size: usize) -> Result<AnchorSet, DetectorError> {
        cfg.validate().map_err(DetectorError::Pyramid)?;
        let sizes = cfg
            .strides
            .iter()
            .map(|&s| {
                [0.5, 1.0, 2.0]
                    .iter()
                    .map(|f| {
                        let side = f * s as f64 / image_size as f64;
                        (side, side)
                    })
                    .collect()
            })
            .collect();
        AnchorSet::new(sizes)
    }

    pub fn num_scales(&self) -> usize {
        self.sizes.len()
    }

    pub fn at(&self, scale: usize) -> &[(f64, f64)] {
        &self.sizes[scale]
    }

    /// The anchor box placed at a grid cell's center.
    pub fn placed(&self, scale: usize, row: usize, col: usize, anchor: usize, dims: (usize, usize)) -> BBox {
        let (w, h) = self.sizes[scale][anchor];
        BBox {
            cx: (col as f64 + 0.5) / dims.1 as f64,
            cy: (row as f64 + 0.5) / dims.0 as f64,
            w,
            h,
        }
    }
}

/// One positive anchor slot and the ground truth it is responsible for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Positive {
    pub scale: usize,
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
    pub gt: usize,
}

/// Positive slots in (scale, row, col, anchor) order; every other slot is
/// negative.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    pub positives: Vec<Positive>,
}

/// Assigns ground truths to anchor slots. `dims` lists each scale's grid as
/// `(rows, cols)`.
pub fn match_anchors(
    gts: &[GroundTruth],
    anchors: &AnchorSet,
    dims: &[(usize, usize)],
) -> Result<Assignment, DetectorError> {
    if dims.len() != anchors.num_scales() {
        return Err(DetectorError::WrongCount {
            what: "anchor scales",
            expected: dims.len(),
            got: anchors.num_scales(),
        });
    }
    // slot -> (gt index, placed-box IoU); later claims win only with
    // strictly higher IoU, so the earlier ground truth keeps ties.
    type Slot = (usize, usize, usize, usize); // (scale, row, col, anchor)
    let mut claims: Vec<(Slot, usize, f64)> = Vec::new();
    let mut claim = |slot: Slot, gt: usize, overlap: f64| {
        match claims.iter_mut().find(|(s, _, _)| *s == slot) {
            Some(entry) => {
                if overlap > entry.2 {
                    entry.1 = gt;
                    entry.2 = overlap;
                }
            }
            None => claims.push((slot, gt, overlap)),
        }
    };

    for (gi, gt) in gts.iter().enumerate() {
        // Best anchor shape across scales; strict improvement keeps the
        // lowest scale and anchor index on ties.
        let mut best: Option<(usize, usize, f64)> = None;
        for scale in 0..anchors.num_scales() {
            for (ai, &(aw, ah)) in anchors.at(scale).iter().enumerate() {
                let fit = shape_iou(aw, ah, gt.bbox.w, gt.bbox.h);
                if best.is_none_or(|(_, _, b)| fit > b) {
                    best = Some((scale, ai, fit));
                }
            }
        }
        let (scale, ai, _) = best.expect("anchor set has at least one anchor");
        let (rows, cols) = dims[scale];
        let row = ((gt.bbox.cy * rows as f64) as usize).min(rows - 1);
        let col = ((gt.bbox.cx * cols as f64) as usize).min(cols - 1);
        let placed = anchors.placed(scale, row, col, ai, dims[scale]);
        claim((scale, row, col, ai), gi, iou(&placed, &gt.bbox));
    }

    // Threshold positives: every placed anchor overlapping a ground truth
    // with IoU > 0.5 becomes responsible for (its best such) ground truth.
    for (scale, &(rows, cols)) in dims.iter().enumerate() {
        for row in 0..rows {
            for col in 0..cols {
                for ai in 0..anchors.at(scale).len() {
                    let placed = anchors.placed(scale, row, col, ai, (rows, cols));
                    for (gi, gt) in gts.iter().enumerate() {
                        let v = iou(&placed, &gt.bbox);
                        if v > 0.5 {
                            claim((scale, row, col, ai), gi, v);
                        }
                    }
                }
            }
        }
    }

    let mut positives: Vec<Positive> = claims
        .into_iter()
        .map(|((scale, row, col, anchor), gt, _)| Positive {
            scale,
            row,
            col,
            anchor,
            gt,
        })
        .collect();
    positives.sort_by_key(|p| (p.scale, p.row, p.col, p.anchor));
    Ok(Assignment { positives })
}
