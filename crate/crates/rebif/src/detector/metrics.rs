//! Detection quality metrics: all-point interpolated average precision at a
//! single IoU threshold, its mean over classes, and size-bucketed variants.
//!
//! Matching is greedy in score order: each detection claims the best
//! still-unmatched ground truth of its class in its image with IoU at or
//! above the threshold. The precision-recall staircase is integrated with
//! the all-point interpolation (precision envelope from the right), so AP is
//! the exact area under the interpolated curve.

use super::{iou, BBox, Detection, DetectorError, GroundTruth};

/// IoU at or above which a detection counts as matching a ground truth.
pub const AP_IOU: f64 = 0.5;
/// Boxes with side below this many pixels are "small".
pub const SMALL_MAX_PX: f64 = 12.0;
/// Boxes with side above this many pixels are "large"; between the two
/// bounds (inclusive) they are "medium".
pub const MEDIUM_MAX_PX: f64 = 24.0;

/// Size class of a box, by the side length of the equal-area square in
/// pixels. Every box falls in exactly one bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

impl SizeBucket {
    pub const ALL: [SizeBucket; 3] = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large];

    pub fn label(self) -> &'static str {
        match self {
            SizeBucket::Small => "small",
            SizeBucket::Medium => "medium",
            SizeBucket::Large => "large",
        }
    }

    pub fn index(self) -> usize {
        match self {
            SizeBucket::Small => 0,
            SizeBucket::Medium => 1,
            SizeBucket::Large => 2,
        }
    }
}

/// Buckets a box by `sqrt(area)` scaled to pixels: `< 12` small, `12..=24`
/// medium, `> 24` large.
pub fn size_bucket(bbox: &BBox, image_px: f64) -> SizeBucket {
    let side = bbox.area().sqrt() * image_px;
    if side < SMALL_MAX_PX {
        SizeBucket::Small
    } else if side <= MEDIUM_MAX_PX {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

/// AP of one class over a flattened detection/ground-truth list.
/// Detections are `(image_id, score, bbox)`; ground truths `(image_id, bbox)`.
fn class_ap(dets: &[(usize, f64, BBox)], gts: &[(usize, BBox)], iou_thresh: f64) -> f64 {
    let n_gt = gts.len();
    if n_gt == 0 {
        return 0.0;
    }
    // Score descending; ties broken by image id then submission order so the
    // result never depends on sort internals.
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j].1
            .total_cmp(&dets[i].1)
            .then(dets[i].0.cmp(&dets[j].0))
            .then(i.cmp(&j))
    });

    let mut matched = vec![false; n_gt];
    let mut is_tp = Vec::with_capacity(order.len());
    for &i in &order {
        let (img, _, b) = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (gi, &(gimg, gb)) in gts.iter().enumerate() {
            if gimg != img || matched[gi] {
                continue;
            }
            let ov = iou(&b, &gb);
            if ov >= iou_thresh && best.is_none_or(|(_, prev)| ov > prev) {
                best = Some((gi, ov));
            }
        }
        if let Some((gi, _)) = best {
            matched[gi] = true;
            is_tp.push(true);
        } else {
            is_tp.push(false);
        }
    }

    // Precision at each rank, then the envelope from the right. Each true
    // positive contributes exactly 1/n_gt of recall, so the area under the
    // interpolated curve is the sum of the envelope at the TP ranks.
    let mut precisions = Vec::with_capacity(is_tp.len());
    let mut tp_cum = 0usize;
    for (rank, &tp) in is_tp.iter().enumerate() {
        tp_cum += tp as usize;
        precisions.push(tp_cum as f64 / (rank + 1) as f64);
    }
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    for rank in (0..is_tp.len()).rev() {
        envelope = envelope.max(precisions[rank]);
        if is_tp[rank] {
            ap += envelope / n_gt as f64;
        }
    }
    ap
}

/// Per-class AP together with how many ground truths backed it.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: f64,
    pub num_gts: usize,
}

/// Evaluation over a whole split: per-class APs for every class that has at
/// least one ground truth, and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub per_class: Vec<ClassAp>,
    pub map: f64,
}

/// All-point interpolated AP per class and its mean, over per-image
/// detection and ground-truth lists (parallel slices, one entry per image).
/// Classes absent from the ground truth are skipped entirely.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
    iou_thresh: f64,
) -> Result<EvalSummary, DetectorError> {
    if dets.len() != gts.len() {
        return Err(DetectorError::WrongCount {
            what: "images in detections vs ground truth",
            expected: gts.len(),
            got: dets.len(),
        });
    }
    for d in dets.iter().flatten() {
        if d.class_id >= num_classes {
            return Err(DetectorError::BadClass {
                class: d.class_id,
                classes: num_classes,
            });
        }
    }
    let mut per_class = Vec::new();
    for class_id in 0..num_classes {
        let class_gts: Vec<(usize, BBox)> = gts
            .iter()
            .enumerate()
            .flat_map(|(img, list)| {
                list.iter()
                    .filter(move |g| g.class_id == class_id)
                    .map(move |g| (img, g.bbox))
            })
            .collect();
        if class_gts.is_empty() {
            continue;
        }
        let class_dets: Vec<(usize, f64, BBox)> = dets
            .iter()
            .enumerate()
            .flat_map(|(img, list)| {
                list.iter()
                    .filter(move |d| d.class_id == class_id)
                    .map(move |d| (img, d.score, d.bbox))
            })
            .collect();
        per_class.push(ClassAp {
            class_id,
            ap: class_ap(&class_dets, &class_gts, iou_thresh),
            num_gts: class_gts.len(),
        });
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64
    };
    Ok(EvalSummary { per_class, map })
}

/// mAP restricted to each size bucket: both detections and ground truths are
/// filtered by their own box size, so every box counts in exactly one
/// bucket. A bucket with no ground truth yields `None`.
pub fn size_bucket_aps(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
    iou_thresh: f64,
    image_px: f64,
) -> Result<[Option<f64>; 3], DetectorError> {
    let mut out = [None, None, None];
    for bucket in SizeBucket::ALL {
        let bucket_gts: Vec<Vec<GroundTruth>> = gts
            .iter()
            .map(|list| {
                list.iter()
                    .filter(|g| size_bucket(&g.bbox, image_px) == bucket)
                    .copied()
                    .collect()
            })
            .collect();
        if bucket_gts.iter().all(|l| l.is_empty()) {
            continue;
        }
        let bucket_dets: Vec<Vec<Detection>> = dets
            .iter()
            .map(|list| {
                list.iter()
                    .filter(|d| size_bucket(&d.bbox, image_px) == bucket)
                    .copied()
                    .collect()
            })
            .collect();
        let summary = average_precision(&bucket_dets, &bucket_gts, num_classes, iou_thresh)?;
        out[bucket.index()] = Some(summary.map);
    }
    Ok(out)
}
