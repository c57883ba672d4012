//! The staged feature extractor feeding the pyramid.
//!
//! Each stage is one 3x3 convolution (padding 1) followed by the leaky
//! activation and a 2x2 max-pool, so stage `j` halves the resolution and
//! its output sits at stride `2^j`. Stages whose stride matches a pyramid
//! scale export their output as that scale's tap; earlier "stem" stages
//! ramp the channel count as 4, 8, ... capped at the first tap width.

use crate::pyramid::cost::LayerPlan;
use crate::pyramid::graphs::ConvBank;
use crate::pyramid::{PyramidConfig, PyramidError};
use crate::tensor::graph::{Graph, VarId};

use super::DetectorError;

/// Number of pooling stages needed to reach the deepest scale.
fn stage_count(cfg: &PyramidConfig) -> Result<usize, DetectorError> {
    let deepest = *cfg.strides.last().expect("validated config has scales");
    if !deepest.is_power_of_two() {
        return Err(DetectorError::BackboneStride { stride: deepest });
    }
    // Pool halving also requires every tap stride to be a power of two;
    // strictly-doubling strides make that follow from the deepest one.
    Ok(deepest.trailing_zeros() as usize)
}

/// Output width of each stage, 1-based: tap stages use the scale width,
/// stem stages ramp 4, 8, ... capped at the first scale width.
pub fn stage_widths(cfg: &PyramidConfig) -> Result<Vec<usize>, DetectorError> {
    cfg.validate().map_err(DetectorError::Pyramid)?;
    let n = stage_count(cfg)?;
    Ok((1..=n)
        .map(|j| {
            let stride = 1usize << j;
            match cfg.strides.iter().position(|&s| s == stride) {
                Some(i) => cfg.widths[i],
                None => (4 << (j - 1)).min(cfg.widths[0]),
            }
        })
        .collect())
}

/// Layer plan for the backbone: `backbone.stage{j}` convolutions, with MACs
/// counted at each stage's pre-pool resolution.
pub fn backbone_plan(
    cfg: &PyramidConfig,
    image_size: usize,
    in_channels: usize,
) -> Result<Vec<LayerPlan>, DetectorError> {
    let widths = stage_widths(cfg)?;
    let deepest = *cfg.strides.last().expect("validated config has scales");
    if image_size == 0 || !image_size.is_multiple_of(deepest) {
        return Err(DetectorError::Pyramid(PyramidError::ImageSize {
            image: image_size,
            stride: deepest,
        }));
    }
    let mut c_in = in_channels;
    let mut plan = Vec::with_capacity(widths.len());
    for (j, &c_out) in widths.iter().enumerate() {
        let res = image_size >> j;
        plan.push(LayerPlan::conv(
            format!("backbone.stage{}", j + 1),
            c_in,
            c_out,
            3,
            1,
            1,
            res,
            res,
        ));
        c_in = c_out;
    }
    Ok(plan)
}

/// Appends the backbone to the tape and returns the tap maps, shallowest
/// first, one per pyramid scale.
pub fn backbone_graph(
    g: &mut Graph,
    bank: &mut impl ConvBank,
    image: VarId,
    cfg: &PyramidConfig,
) -> Result<Vec<VarId>, DetectorError> {
    cfg.validate().map_err(DetectorError::Pyramid)?;
    let n = stage_count(cfg)?;
    let shape = g.value(image).shape();
    let deepest = *cfg.strides.last().expect("validated config has scales");
    if shape.h == 0 || !shape.h.is_multiple_of(deepest) || shape.w == 0 || !shape.w.is_multiple_of(deepest) {
        return Err(DetectorError::Pyramid(PyramidError::ImageSize {
            image: shape.h.max(shape.w),
            stride: deepest,
        }));
    }
    let mut cur = image;
    let mut taps = Vec::with_capacity(cfg.num_scales);
    for j in 1..=n {
        let conv = bank.conv_node(g, &format!("backbone.stage{j}"), cur)?;
        let act = g.leaky_relu(conv, cfg.leaky_slope)?;
        cur = g.maxpool2(act)?;
        if cfg.strides.contains(&(1 << j)) {
            taps.push(cur);
        }
    }
    debug_assert_eq!(taps.len(), cfg.num_scales);
    Ok(taps)
}
