//! Static cost model: per-layer multiply-accumulate and parameter counts.
//!
//! A [`LayerPlan`] list is the canonical layout of a model's convolutions:
//! the same names, in the same order, that the parameter store allocates and
//! the checkpoint format serializes. Only convolutions contribute MACs and
//! parameters; reorganization, upsampling, concatenation, and activations
//! are free in this accounting.

use super::{PyramidConfig, PyramidError, Variant};

/// One planned convolution: channel widths, geometry, and output dims.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerPlan {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl LayerPlan {
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        out_h: usize,
        out_w: usize,
    ) -> Self {
        LayerPlan {
            name: name.into(),
            c_in,
            c_out,
            k,
            stride,
            padding,
            out_h,
            out_w,
        }
    }

    /// Multiply-accumulates: one per kernel tap per output element.
    pub fn macs(&self) -> u64 {
        (self.c_out * self.c_in * self.k * self.k * self.out_h * self.out_w) as u64
    }

    /// Learnable scalars: the weight block plus one bias per output channel.
    pub fn params(&self) -> u64 {
        (self.c_out * self.c_in * self.k * self.k + self.c_out) as u64
    }

    /// The module this layer belongs to: the name up to the first dot.
    pub fn module(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }
}

pub fn total_macs(plans: &[LayerPlan]) -> u64 {
    plans.iter().map(LayerPlan::macs).sum()
}

pub fn total_params(plans: &[LayerPlan]) -> u64 {
    plans.iter().map(LayerPlan::params).sum()
}

/// Aggregated cost of one module (layers sharing a name prefix).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleCost {
    pub module: String,
    pub macs: u64,
    pub params: u64,
}

/// Sums costs per module, in first-appearance order.
pub fn module_totals(plans: &[LayerPlan]) -> Vec<ModuleCost> {
    let mut out: Vec<ModuleCost> = Vec::new();
    for p in plans {
        let module = p.module();
        match out.iter_mut().find(|m| m.module == module) {
            Some(m) => {
                m.macs += p.macs();
                m.params += p.params();
            }
            None => out.push(ModuleCost {
                module: module.to_string(),
                macs: p.macs(),
                params: p.params(),
            }),
        }
    }
    out
}

fn checked_dims(
    cfg: &PyramidConfig,
    image_size: usize,
) -> Result<Vec<(usize, usize)>, PyramidError> {
    cfg.validate()?;
    let deepest = *cfg.strides.last().expect("validated config has scales");
    if image_size == 0 || !image_size.is_multiple_of(deepest) {
        return Err(PyramidError::ImageSize {
            image: image_size,
            stride: deepest,
        });
    }
    Ok(cfg.feature_dims(image_size))
}

/// Layer plan for the residual top-down neck: per scale, the post-fuse mix
/// over the neighbor bundle (projecting to twice the scale width) followed
/// by the two-stage purifier that halves it back down.
pub fn residual_neck_plan(
    cfg: &PyramidConfig,
    image_size: usize,
) -> Result<Vec<LayerPlan>, PyramidError> {
    let dims = checked_dims(cfg, image_size)?;
    let s_count = cfg.num_scales;
    let mut out = Vec::new();
    for i in 0..s_count {
        let c = cfg.widths[i];
        let bundle = if i > 0 { 4 * cfg.widths[i - 1] } else { 0 }
            + c
            + if i + 1 < s_count { cfg.widths[i + 1] } else { 0 };
        let (h, w) = dims[i];
        let p = format!("neck.s{}", i + 1);
        out.push(LayerPlan::conv(format!("{p}.core.post_fuse"), bundle, 2 * c, 1, 1, 0, h, w));
        out.push(LayerPlan::conv(format!("{p}.purify.stage1.bottleneck"), 2 * c, c, 1, 1, 0, h, w));
        out.push(LayerPlan::conv(format!("{p}.purify.stage1.conv3"), c, c, 3, 1, 1, h, w));
        out.push(LayerPlan::conv(format!("{p}.purify.stage2.bottleneck"), c, c, 1, 1, 0, h, w));
        out.push(LayerPlan::conv(format!("{p}.purify.stage2.conv3"), c, c, 3, 1, 1, h, w));
    }
    Ok(out)
}

/// Layer plan for the plain top-down neck: per scale a lateral 1x1, a 1x1
/// projection of the upsampled deeper map (absent at the deepest scale),
/// and a 3x3 smoothing conv.
pub fn plain_neck_plan(
    cfg: &PyramidConfig,
    image_size: usize,
) -> Result<Vec<LayerPlan>, PyramidError> {
    let dims = checked_dims(cfg, image_size)?;
    let s_count = cfg.num_scales;
    let mut out = Vec::new();
    for i in 0..s_count {
        let c = cfg.widths[i];
        let (h, w) = dims[i];
        let p = format!("neck.s{}", i + 1);
        out.push(LayerPlan::conv(format!("{p}.lateral"), c, c, 1, 1, 0, h, w));
        if i + 1 < s_count {
            out.push(LayerPlan::conv(format!("{p}.proj"), cfg.widths[i + 1], c, 1, 1, 0, h, w));
        }
        out.push(LayerPlan::conv(format!("{p}.smooth"), c, c, 3, 1, 1, h, w));
    }
    Ok(out)
}

/// Layer plan for the bottom-up fusion pass: one 1x1 mix per deeper scale.
pub fn bottomup_plan(
    cfg: &PyramidConfig,
    image_size: usize,
) -> Result<Vec<LayerPlan>, PyramidError> {
    let dims = checked_dims(cfg, image_size)?;
    let mut out = Vec::new();
    for i in 1..cfg.num_scales {
        let (h, w) = dims[i];
        out.push(LayerPlan::conv(
            format!("bfm.s{}.fuse", i + 1),
            4 * cfg.widths[i - 1] + cfg.widths[i],
            cfg.widths[i],
            1,
            1,
            0,
            h,
            w,
        ));
    }
    Ok(out)
}

/// The neck layers a variant uses: its top-down pass, plus the bottom-up
/// fusion pass when the variant includes one.
pub fn variant_neck_plan(
    cfg: &PyramidConfig,
    variant: Variant,
    image_size: usize,
) -> Result<Vec<LayerPlan>, PyramidError> {
    let mut out = if variant.residual_topdown() {
        residual_neck_plan(cfg, image_size)?
    } else {
        plain_neck_plan(cfg, image_size)?
    };
    if variant.bottom_up() {
        out.extend(bottomup_plan(cfg, image_size)?);
    }
    Ok(out)
}
