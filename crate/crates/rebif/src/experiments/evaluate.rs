//! Held-out evaluation: run the detector over a dataset, decode and
//! suppress boxes, and score them against the exact labels.
//!
//! Evaluation is deterministic: images are processed in dataset order, in
//! fixed-size batches, and every reduction (matching, precision envelope,
//! bucket split) is sequential, so re-running yields identical numbers.

use crate::detector::metrics::{average_precision, size_bucket_aps, EvalSummary};
use crate::detector::model::Model;
use crate::detector::predict::decode_nms;
use crate::detector::{Detection, GroundTruth};

use super::data::Sample;
use super::train::stack_images;
use super::ExperimentError;

/// Images per forward pass; amortizes graph construction without changing
/// any result (decoding is per-image).
const EVAL_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    /// Per-class APs and their mean, over classes present in the labels.
    pub summary: EvalSummary,
    /// AP restricted to small/medium/large boxes; `None` where the labels
    /// have no box of that size.
    pub size_aps: [Option<f64>; 3],
    /// Post-suppression detections per image, in dataset order.
    pub detections: Vec<Vec<Detection>>,
}

/// Runs decode + suppression + scoring for `model` over `samples`.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    score_thresh: f64,
    nms_iou: f64,
    ap_iou: f64,
) -> Result<EvalOutcome, ExperimentError> {
    if samples.is_empty() {
        return Err(ExperimentError::EmptyDataset);
    }
    let layout = model.spec.head_layout();
    let mut detections: Vec<Vec<Detection>> = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let heads = model.predict(&images)?;
        let head_refs: Vec<&_> = heads.iter().collect();
        detections.extend(decode_nms(
            &head_refs,
            &model.spec.anchors,
            &layout,
            score_thresh,
            nms_iou,
        )?);
    }
    let gts: Vec<Vec<GroundTruth>> = samples.iter().map(|s| s.gts.clone()).collect();
    let summary = average_precision(&detections, &gts, model.spec.num_classes, ap_iou)?;
    let size_aps = size_bucket_aps(
        &detections,
        &gts,
        model.spec.num_classes,
        ap_iou,
        model.spec.image_size as f64,
    )?;
    Ok(EvalOutcome {
        summary,
        size_aps,
        detections,
    })
}
