//! The training loss, differentiable on the tape.
//!
//! Per image: binary cross-entropy on objectness over every anchor slot,
//! binary cross-entropy on class logits over positive slots, and squared
//! error on the box regressors over positive slots, weighted 1 / 1 / 5.
//! Center targets compare `sigmoid(tx)` against the ground truth's offset
//! within its cell; size targets compare `tw` against `ln(gt / anchor)`.
//! Logits are clamped to +/-20 before any sigmoid or cross-entropy. The
//! batch loss is the mean of per-image sums.

use crate::tensor::graph::{Graph, VarId};
use crate::tensor::{Shape4, Tensor4};

use super::anchors::{match_anchors, AnchorSet};
use super::{DetectorError, GroundTruth, HeadLayout};

/// Clamp applied to logits before sigmoid / cross-entropy.
pub const LOGIT_CLAMP: f64 = 20.0;
/// Weight of the squared box-regression term.
pub const BOX_WEIGHT: f64 = 5.0;

/// One positive slot with its regression and classification targets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositiveTarget {
    pub scale: usize,
    pub anchor: usize,
    pub row: usize,
    pub col: usize,
    pub class_id: usize,
    /// Center offsets within the cell, each in [0, 1).
    pub ox: f64,
    pub oy: f64,
    /// Log size ratios versus the anchor shape.
    pub lw: f64,
    pub lh: f64,
}

/// All targets for one image: positive slots (every other slot is a
/// negative with objectness target 0).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageTargets {
    pub positives: Vec<PositiveTarget>,
}

/// Matches ground truths to anchors and derives per-slot targets.
pub fn build_targets(
    gts: &[GroundTruth],
    anchors: &AnchorSet,
    dims: &[(usize, usize)],
    num_classes: usize,
) -> Result<ImageTargets, DetectorError> {
    let assignment = match_anchors(gts, anchors, dims)?;
    let mut positives = Vec::with_capacity(assignment.positives.len());
    for p in &assignment.positives {
        let gt = &gts[p.gt];
        if gt.class_id >= num_classes {
            return Err(DetectorError::BadClass {
                class: gt.class_id,
                classes: num_classes,
            });
        }
        let (rows, cols) = dims[p.scale];
        let (aw, ah) = anchors.at(p.scale)[p.anchor];
        positives.push(PositiveTarget {
            scale: p.scale,
            anchor: p.anchor,
            row: p.row,
            col: p.col,
            class_id: gt.class_id,
            ox: gt.bbox.cx * cols as f64 - p.col as f64,
            oy: gt.bbox.cy * rows as f64 - p.row as f64,
            lw: (gt.bbox.w / aw).ln(),
            lh: (gt.bbox.h / ah).ln(),
        });
    }
    Ok(ImageTargets { positives })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable `BCE(logit, target)` after clamping the logit.
fn bce(logit: f64, target: f64) -> f64 {
    let c = logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    softplus(c) - target * c
}

/// `d BCE / d logit`, zero where the clamp is active.
fn bce_grad(logit: f64, target: f64) -> f64 {
    if logit.abs() >= LOGIT_CLAMP {
        return 0.0;
    }
    sigmoid(logit) - target
}

pub(crate) struct SlotIndex {
    pub(crate) base: usize,
    pub(crate) plane: usize,
}

/// Flat index of channel `offset` within anchor `a` at `(row, col)`.
pub(crate) fn slot(shape: Shape4, n: usize, a: usize, k: usize, offset: usize, row: usize, col: usize) -> SlotIndex {
    let c = a * (5 + k) + offset;
    SlotIndex {
        base: shape.idx(n, c, row, col),
        plane: shape.h * shape.w,
    }
}

/// Single source of the loss arithmetic: forward value, and optionally the
/// gradients with respect to every head tensor.
fn loss_and_grads(
    heads: &[&Tensor4],
    batch: &[ImageTargets],
    layout: &HeadLayout,
    want_grads: bool,
) -> (f64, Vec<Tensor4>) {
    let n_images = batch.len();
    let k = layout.num_classes;
    let mut grads: Vec<Tensor4> = if want_grads {
        heads.iter().map(|h| Tensor4::zeros(h.shape())).collect()
    } else {
        Vec::new()
    };
    let inv_n = 1.0 / n_images as f64;
    let mut total = 0.0;

    for (scale, head) in heads.iter().enumerate() {
        let shape = head.shape();
        let a_count = layout.anchors_per_scale[scale];
        for n in 0..n_images {
            // Objectness targets: 1 at positive slots, else 0.
            for a in 0..a_count {
                let obj = slot(shape, n, a, k, 4, 0, 0);
                for cell in 0..obj.plane {
                    let idx = obj.base + cell;
                    let logit = head.data()[idx];
                    let row = cell / shape.w;
                    let col = cell % shape.w;
                    let t = batch[n]
                        .positives
                        .iter()
                        .any(|p| {
                            p.scale == scale && p.anchor == a && p.row == row && p.col == col
                        }) as usize as f64;
                    total += bce(logit, t) * inv_n;
                    if want_grads {
                        grads[scale].data_mut()[idx] += bce_grad(logit, t) * inv_n;
                    }
                }
            }
            // Class and box terms over this image's positives at this scale.
            for p in batch[n].positives.iter().filter(|p| p.scale == scale) {
                for class in 0..k {
                    let idx = slot(shape, n, p.anchor, k, 5 + class, p.row, p.col).base;
                    let logit = head.data()[idx];
                    let t = (class == p.class_id) as usize as f64;
                    total += bce(logit, t) * inv_n;
                    if want_grads {
                        grads[scale].data_mut()[idx] += bce_grad(logit, t) * inv_n;
                    }
                }
                let center_targets = [p.ox, p.oy];
                for (offset, &target) in center_targets.iter().enumerate() {
                    let idx = slot(shape, n, p.anchor, k, offset, p.row, p.col).base;
                    let logit = head.data()[idx];
                    let s = sigmoid(logit.clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
                    total += BOX_WEIGHT * (s - target) * (s - target) * inv_n;
                    if want_grads && logit.abs() < LOGIT_CLAMP {
                        grads[scale].data_mut()[idx] +=
                            BOX_WEIGHT * 2.0 * (s - target) * s * (1.0 - s) * inv_n;
                    }
                }
                let size_targets = [p.lw, p.lh];
                for (i, &target) in size_targets.iter().enumerate() {
                    let idx = slot(shape, n, p.anchor, k, 2 + i, p.row, p.col).base;
                    let v = head.data()[idx];
                    total += BOX_WEIGHT * (v - target) * (v - target) * inv_n;
                    if want_grads {
                        grads[scale].data_mut()[idx] +=
                            BOX_WEIGHT * 2.0 * (v - target) * inv_n;
                    }
                }
            }
        }
    }
    (total, grads)
}

/// Checks head count, per-scale channel layout, and a consistent batch size
/// across scales; returns that batch size.
pub(crate) fn validate_heads(
    heads: &[&Tensor4],
    layout: &HeadLayout,
) -> Result<usize, DetectorError> {
    if heads.len() != layout.num_scales() {
        return Err(DetectorError::WrongCount {
            what: "head maps",
            expected: layout.num_scales(),
            got: heads.len(),
        });
    }
    let n_images = heads.first().map_or(0, |h| h.shape().n);
    for (scale, head) in heads.iter().enumerate() {
        let shape = head.shape();
        if shape.c != layout.channels(scale) {
            return Err(DetectorError::HeadLayout {
                scale: scale + 1,
                expected: layout.channels(scale),
                got: shape.c,
            });
        }
        if shape.n != n_images {
            return Err(DetectorError::WrongCount {
                what: "images across head maps",
                expected: n_images,
                got: shape.n,
            });
        }
    }
    Ok(n_images)
}

fn validate(
    heads: &[&Tensor4],
    batch: &[ImageTargets],
    layout: &HeadLayout,
) -> Result<(), DetectorError> {
    let n_images = validate_heads(heads, layout)?;
    if n_images != batch.len() {
        return Err(DetectorError::WrongCount {
            what: "images in the target batch",
            expected: n_images,
            got: batch.len(),
        });
    }
    for targets in batch {
        for p in &targets.positives {
            let shape = heads
                .get(p.scale)
                .ok_or(DetectorError::WrongCount {
                    what: "scales referenced by targets",
                    expected: heads.len(),
                    got: p.scale + 1,
                })?
                .shape();
            if p.anchor >= layout.anchors_per_scale[p.scale]
                || p.row >= shape.h
                || p.col >= shape.w
                || p.class_id >= layout.num_classes
            {
                return Err(DetectorError::HeadLayout {
                    scale: p.scale + 1,
                    expected: layout.channels(p.scale),
                    got: shape.c,
                });
            }
        }
    }
    Ok(())
}

/// Appends the detection loss as a scalar tape node over the head maps.
/// Fails fast if the current loss value is non-finite (divergence guard).
pub fn detection_loss(
    g: &mut Graph,
    head_ids: &[VarId],
    batch: &[ImageTargets],
    layout: &HeadLayout,
) -> Result<VarId, DetectorError> {
    let heads: Vec<&Tensor4> = head_ids.iter().map(|&id| g.value(id)).collect();
    validate(&heads, batch, layout)?;
    let (value, _) = loss_and_grads(&heads, batch, layout, false);
    if !value.is_finite() {
        return Err(DetectorError::NonFiniteLoss);
    }
    let batch_owned = batch.to_vec();
    let layout_owned = layout.clone();
    let node = g.custom(
        Tensor4::from_vec(Shape4::new(1, 1, 1, 1), vec![value]).expect("scalar"),
        head_ids.to_vec(),
        Box::new(move |grad_out, parents| {
            let g0 = grad_out.data()[0];
            let (_, mut grads) = loss_and_grads(parents, &batch_owned, &layout_owned, true);
            for grad in &mut grads {
                for v in grad.data_mut() {
                    *v *= g0;
                }
            }
            grads
        }),
    );
    Ok(node)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BBox;
    use crate::pyramid::PyramidConfig;
    use crate::tensor::gradcheck::{grad_check_many, DEFAULT_EPS};
    use crate::tensor::rng::Rng;

    fn layout(scales: usize) -> HeadLayout {
        HeadLayout {
            anchors_per_scale: vec![3; scales],
            num_classes: 3,
        }
    }

    fn gt(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> GroundTruth {
        GroundTruth::new(class_id, BBox::new(cx, cy, w, h).unwrap(), 3).unwrap()
    }

    #[test]
    fn zero_logits_with_no_objects_cost_ln2_per_slot() {
        // Two scales (4x4 and 2x2), 3 anchors, 3 classes: 60 anchor slots.
        let lay = layout(2);
        let heads = [
            Tensor4::zeros(Shape4::new(2, 24, 4, 4)),
            Tensor4::zeros(Shape4::new(2, 24, 2, 2)),
        ];
        let batch = vec![ImageTargets::default(); 2];
        let mut g = Graph::new();
        let ids: Vec<VarId> = heads.iter().map(|h| g.leaf(h.clone())).collect();
        let loss = detection_loss(&mut g, &ids, &batch, &lay).unwrap();
        let expected = 60.0 * std::f64::consts::LN_2;
        assert!(
            (g.value(loss).data()[0] - expected).abs() < 1e-12,
            "loss {} vs {}",
            g.value(loss).data()[0],
            expected
        );
    }

    /// One positive: anchor 1 of scale 1 at cell (2,2), class 1, centered
    /// exactly on the cell with exactly the anchor's size.
    fn one_positive_setup() -> (AnchorSet, Vec<(usize, usize)>, Vec<GroundTruth>) {
        let cfg = PyramidConfig::standard(2).unwrap();
        let anchors = AnchorSet::standard(&cfg, 64).unwrap();
        let dims = vec![(8, 8), (4, 4)];
        let gts = vec![gt(1, 0.3125, 0.3125, 0.125, 0.125)];
        (anchors, dims, gts)
    }

    #[test]
    fn targets_encode_cell_offsets_and_log_ratios() {
        let (anchors, dims, gts) = one_positive_setup();
        let t = build_targets(&gts, &anchors, &dims, 3).unwrap();
        assert_eq!(t.positives.len(), 1);
        let p = t.positives[0];
        assert_eq!((p.scale, p.row, p.col, p.anchor, p.class_id), (0, 2, 2, 1, 1));
        assert!((p.ox - 0.5).abs() < 1e-12, "centered on the cell");
        assert!((p.oy - 0.5).abs() < 1e-12);
        assert_eq!(p.lw, 0.0, "exactly anchor-sized");
        assert_eq!(p.lh, 0.0);

        // A ground truth twice the anchor's width: lw = ln 2.
        let wide = vec![gt(0, 0.5, 0.5, 0.25, 0.125)];
        let t = build_targets(&wide, &anchors, &dims, 3).unwrap();
        let p = t
            .positives
            .iter()
            .find(|p| (p.lw - std::f64::consts::LN_2).abs() < 1e-12 && p.lh == 0.0)
            .expect("some positive must carry the ln-ratio targets");
        assert!(p.lw > 0.0);
    }

    #[test]
    fn saturated_correct_logits_cost_almost_nothing() {
        let (anchors, dims, gts) = one_positive_setup();
        let lay = layout(2);
        let targets = build_targets(&gts, &anchors, &dims, 3).unwrap();
        let p = targets.positives[0];

        let mut heads = [
            Tensor4::filled(Shape4::new(1, 24, 8, 8), -LOGIT_CLAMP),
            Tensor4::filled(Shape4::new(1, 24, 4, 4), -LOGIT_CLAMP),
        ];
        // Zero the box channels everywhere (their loss only reads positives),
        // then saturate the positive slot: obj +20, true class +20, exact
        // box: sigmoid(0) = 0.5 = offset target, 0 = ln-ratio target.
        for head in &mut heads {
            let shape = head.shape();
            for a in 0..3 {
                for offset in 0..4 {
                    for cell in 0..shape.h * shape.w {
                        let idx = shape.idx(0, a * 8 + offset, cell / shape.w, cell % shape.w);
                        head.data_mut()[idx] = 0.0;
                    }
                }
            }
        }
        let shape = heads[p.scale].shape();
        let obj = shape.idx(0, p.anchor * 8 + 4, p.row, p.col);
        heads[p.scale].data_mut()[obj] = LOGIT_CLAMP;
        let cls = shape.idx(0, p.anchor * 8 + 5 + p.class_id, p.row, p.col);
        heads[p.scale].data_mut()[cls] = LOGIT_CLAMP;

        let mut g = Graph::new();
        let ids: Vec<VarId> = heads.iter().map(|h| g.leaf(h.clone())).collect();
        let loss = detection_loss(&mut g, &ids, &[targets], &lay).unwrap();
        let v = g.value(loss).data()[0];
        assert!(v > 0.0, "cross-entropy never reaches exactly zero");
        assert!(v < 1e-6, "saturated correct predictions cost {v}");
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // One-scale toy: 2 images, 1 anchor, 2 classes, 2x2 grid.
        let lay = HeadLayout {
            anchors_per_scale: vec![1],
            num_classes: 2,
        };
        let mut rng = Rng::seeded(40);
        let mut head = Tensor4::zeros(Shape4::new(2, 7, 2, 2));
        for v in head.data_mut() {
            *v = rng.uniform(-2.0, 2.0);
        }
        let batch = vec![
            ImageTargets {
                positives: vec![PositiveTarget {
                    scale: 0,
                    anchor: 0,
                    row: 1,
                    col: 0,
                    class_id: 1,
                    ox: 0.25,
                    oy: 0.75,
                    lw: 0.4,
                    lh: -0.3,
                }],
            },
            ImageTargets::default(),
        ];
        let err = grad_check_many(&[head], 0, DEFAULT_EPS, |g, ids| {
            let batch = batch.clone();
            let lay = lay.clone();
            detection_loss(g, &[ids[0]], &batch, &lay).map_err(|e| match e {
                DetectorError::Pyramid(crate::pyramid::PyramidError::Tensor(t)) => t,
                other => panic!("unexpected detector error: {other}"),
            })
        })
        .unwrap();
        assert!(err < 1e-4, "loss gradient error {err}");
    }

    #[test]
    fn loss_is_positive_for_generic_logits() {
        let lay = HeadLayout {
            anchors_per_scale: vec![1],
            num_classes: 2,
        };
        let mut rng = Rng::seeded(41);
        let mut head = Tensor4::zeros(Shape4::new(1, 7, 2, 2));
        for v in head.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        let mut g = Graph::new();
        let id = g.leaf(head);
        let loss = detection_loss(&mut g, &[id], &[ImageTargets::default()], &lay).unwrap();
        assert!(g.value(loss).data()[0] > 0.0);
    }

    #[test]
    fn divergent_box_logits_are_reported_not_propagated() {
        let lay = HeadLayout {
            anchors_per_scale: vec![1],
            num_classes: 2,
        };
        let mut head = Tensor4::zeros(Shape4::new(1, 7, 2, 2));
        // tw channel (offset 2) of the positive slot at (0,0): squared error
        // squares 1e200 into overflow.
        let idx = head.shape().idx(0, 2, 0, 0);
        head.data_mut()[idx] = 1e200;
        let batch = vec![ImageTargets {
            positives: vec![PositiveTarget {
                scale: 0,
                anchor: 0,
                row: 0,
                col: 0,
                class_id: 0,
                ox: 0.5,
                oy: 0.5,
                lw: 0.0,
                lh: 0.0,
            }],
        }];
        let mut g = Graph::new();
        let id = g.leaf(head);
        assert_eq!(
            detection_loss(&mut g, &[id], &batch, &lay).unwrap_err(),
            DetectorError::NonFiniteLoss
        );
    }

    #[test]
    fn layout_mismatches_are_rejected() {
        let lay = layout(1);
        let mut g = Graph::new();
        let id = g.leaf(Tensor4::zeros(Shape4::new(1, 7, 2, 2)));
        assert!(matches!(
            detection_loss(&mut g, &[id], &[ImageTargets::default()], &lay).unwrap_err(),
            DetectorError::HeadLayout { scale: 1, expected: 24, got: 7 }
        ));
        let id24 = g.leaf(Tensor4::zeros(Shape4::new(1, 24, 2, 2)));
        assert!(matches!(
            detection_loss(&mut g, &[id24], &[], &lay).unwrap_err(),
            DetectorError::WrongCount { what: "images in the target batch", .. }
        ));
    }
}
