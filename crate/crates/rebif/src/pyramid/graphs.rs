//! Tape builders for the fusion passes.
//!
//! Builders locate convolution layers by name through the [`ConvBank`]
//! trait, so a forward pass can be wired identically whether the parameters
//! come from standalone block structs (tests, single-block calls) or from a
//! training parameter store. Layer names are hierarchical and stable; they
//! double as checkpoint keys:
//!
//! - `neck.s{i}.core.post_fuse`, `neck.s{i}.purify.stage{1,2}.{bottleneck,conv3}`,
//!   optional `neck.s{i}.skip_proj` (residual top-down, scales 1-based,
//!   shallowest first);
//! - `neck.s{i}.{lateral,proj,smooth}` (plain top-down);
//! - `bfm.s{i}.fuse` (bottom-up, at the deeper scale of each pair).

use crate::tensor::graph::{Graph, VarId};
use crate::tensor::ops::ConvParams;

use super::PyramidError;

/// Source of named convolution layers during a forward build.
pub trait ConvBank {
    /// Whether a layer of this name exists (used for optional layers).
    fn has(&self, name: &str) -> bool;
    /// Appends `conv2d(x)` for the named layer to the graph.
    fn conv_node(&mut self, g: &mut Graph, name: &str, x: VarId)
        -> Result<VarId, PyramidError>;
}

/// A [`ConvBank`] over borrowed parameter structs, for tensor-level calls.
#[derive(Default)]
pub struct ParamConvBank<'a> {
    layers: Vec<(String, &'a ConvParams)>,
}

impl<'a> ParamConvBank<'a> {
    pub fn new() -> Self {
        ParamConvBank::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, p: &'a ConvParams) {
        self.layers.push((name.into(), p));
    }
}

impl ConvBank for ParamConvBank<'_> {
    fn has(&self, name: &str) -> bool {
        self.layers.iter().any(|(n, _)| n == name)
    }

    fn conv_node(
        &mut self,
        g: &mut Graph,
        name: &str,
        x: VarId,
    ) -> Result<VarId, PyramidError> {
        let p = self
            .layers
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| *p)
            .ok_or_else(|| PyramidError::UnknownLayer { name: name.into() })?;
        let w = g.leaf(p.weight.clone());
        let b = g.leaf(p.bias.clone());
        Ok(g.conv2d(x, w, b, p.stride, p.padding)?)
    }
}

/// A [`ConvBank`] over weights and biases that are already tape leaves.
/// Training and parameter-gradient checks use this so the same leaf ids can
/// be perturbed or updated afterwards.
#[derive(Default)]
pub struct IdConvBank {
    layers: Vec<(String, VarId, VarId, usize, usize)>,
}

impl IdConvBank {
    pub fn new() -> Self {
        IdConvBank::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        weight: VarId,
        bias: VarId,
        stride: usize,
        padding: usize,
    ) {
        self.layers.push((name.into(), weight, bias, stride, padding));
    }
}

impl ConvBank for IdConvBank {
    fn has(&self, name: &str) -> bool {
        self.layers.iter().any(|(n, ..)| n == name)
    }

    fn conv_node(
        &mut self,
        g: &mut Graph,
        name: &str,
        x: VarId,
    ) -> Result<VarId, PyramidError> {
        let &(_, w, b, stride, padding) = self
            .layers
            .iter()
            .find(|(n, ..)| n == name)
            .ok_or_else(|| PyramidError::UnknownLayer { name: name.into() })?;
        Ok(g.conv2d(x, w, b, stride, padding)?)
    }
}

fn check_ratio(
    g: &Graph,
    role: &'static str,
    id: VarId,
    current: VarId,
    double: bool,
) -> Result<(), PyramidError> {
    let s = g.value(id).shape();
    let c = g.value(current).shape();
    let (eh, ew) = if double {
        (c.h * 2, c.w * 2)
    } else {
        (c.h / 2, c.w / 2)
    };
    let ok = if double {
        s.h == eh && s.w == ew
    } else {
        s.h * 2 == c.h && s.w * 2 == c.w
    };
    if ok {
        Ok(())
    } else {
        Err(PyramidError::SpatialRatio {
            role,
            factor: if double { "2" } else { "0.5" },
            expected: format!("{eh}x{ew}"),
            got: format!("{}x{}", s.h, s.w),
        })
    }
}

/// Fusion core: reorganize the shallow map into sub-patches, align the deep
/// map by nearest upsampling, concatenate with the current map, mix with a
/// 1x1 convolution and activate. Either neighbor may be absent (boundary
/// scales).
pub fn core_graph(
    g: &mut Graph,
    bank: &mut impl ConvBank,
    prefix: &str,
    shallow: Option<VarId>,
    current: VarId,
    deep: Option<VarId>,
    slope: f64,
) -> Result<VarId, PyramidError> {
    if let Some(s) = shallow {
        check_ratio(g, "shallow", s, current, true)?;
    }
    if let Some(d) = deep {
        check_ratio(g, "deep", d, current, false)?;
    }
    let mut parts = Vec::with_capacity(3);
    if let Some(s) = shallow {
        parts.push(g.space_to_depth2(s)?);
    }
    parts.push(current);
    if let Some(d) = deep {
        parts.push(g.upsample_nearest2(d));
    }
    let bundle = g.concat_channels(&parts)?;
    let mixed = bank.conv_node(g, &format!("{prefix}.post_fuse"), bundle)?;
    Ok(g.leaky_relu(mixed, slope)?)
}

/// Two (1x1 bottleneck, activation, 3x3 convolution, activation) stages;
/// the first stage's bottleneck halves the channel count.
pub fn purification_graph(
    g: &mut Graph,
    bank: &mut impl ConvBank,
    prefix: &str,
    x: VarId,
    slope: f64,
) -> Result<VarId, PyramidError> {
    let mut cur = x;
    for stage in 1..=2 {
        let narrowed = bank.conv_node(g, &format!("{prefix}.stage{stage}.bottleneck"), cur)?;
        let narrowed = g.leaky_relu(narrowed, slope)?;
        let refined = bank.conv_node(g, &format!("{prefix}.stage{stage}.conv3"), narrowed)?;
        cur = g.leaky_relu(refined, slope)?;
    }
    Ok(cur)
}

/// Residual fusion: `F = skip(current) + delta`, where `delta` is the
/// purified core fusion and `skip` is the identity (or a 1x1 projection when
/// a layer named `{prefix}.skip_proj` exists in the bank). Returns
/// `(F, delta)` so the residual identity stays assertable.
pub fn recore_graph(
    g: &mut Graph,
    bank: &mut impl ConvBank,
    prefix: &str,
    shallow: Option<VarId>,
    current: VarId,
    deep: Option<VarId>,
    slope: f64,
) -> Result<(VarId, VarId), PyramidError> {
    let fused = core_graph(g, bank, &format!("{prefix}.core"), shallow, current, deep, slope)?;
    let delta = purification_graph(g, bank, &format!("{prefix}.purify"), fused, slope)?;
    let skip_name = format!("{prefix}.skip_proj");
    let skip = if bank.has(&skip_name) {
        bank.conv_node(g, &skip_name, current)?
    } else {
        current
    };
    let skip_c = g.value(skip).shape().c;
    let delta_c = g.value(delta).shape().c;
    if skip_c != delta_c {
        return Err(PyramidError::SkipWidth {
            skip: skip_c,
            delta: delta_c,
        });
    }
    Ok((g.add(skip, delta)?, delta))
}

/// Bi-fusion: reorganize the shallower (higher-resolution) map into four
/// sub-patches, concatenate with the deeper map, and mix with a learned 1x1
/// convolution. No activation: the fusion is a weighted combination.
pub fn bfm_graph(
    g: &mut Graph,
    bank: &mut impl ConvBank,
    name: &str,
    fm_high: VarId,
    fm_low: VarId,
) -> Result<VarId, PyramidError> {
    check_ratio(g, "fm_high", fm_high, fm_low, true)?;
    let packed = g.space_to_depth2(fm_high)?;
    let bundle = g.concat_channels(&[packed, fm_low])?;
    bank.conv_node(g, name, bundle)
}

/// Residual top-down pass over backbone taps (shallowest first). Each scale
/// fuses its own tap, the raw tap one scale shallower, and the already-fused
/// result one scale deeper. Returns `(topdown_maps, deltas)`.
pub fn residual_topdown_graph(
    g: &mut Graph,
    bank: &mut impl ConvBank,
    backbone: &[VarId],
    slope: f64,
) -> Result<(Vec<VarId>, Vec<VarId>), PyramidError> {
    let s_count = backbone.len();
    let mut fused_rev = Vec::with_capacity(s_count);
    let mut deeper = None;
    for i in (0..s_count).rev() {
        let shallow = if i > 0 { Some(backbone[i - 1]) } else { None };
        let (f, d) = recore_graph(
            g,
            bank,
            &format!("neck.s{}", i + 1),
            shallow,
            backbone[i],
            deeper,
            slope,
        )?;
        fused_rev.push((f, d));
        deeper = Some(f);
    }
    fused_rev.reverse();
    Ok(fused_rev.into_iter().unzip())
}

/// Classic top-down pass: a 1x1 lateral per scale, plus the upsampled and
/// 1x1-projected deeper result, smoothed by an activated 3x3 convolution.
pub fn plain_topdown_graph(
    g: &mut Graph,
    bank: &mut impl ConvBank,
    backbone: &[VarId],
    slope: f64,
) -> Result<Vec<VarId>, PyramidError> {
    let s_count = backbone.len();
    let mut topdown_rev = Vec::with_capacity(s_count);
    let mut deeper = None;
    for i in (0..s_count).rev() {
        let prefix = format!("neck.s{}", i + 1);
        let lateral = bank.conv_node(g, &format!("{prefix}.lateral"), backbone[i])?;
        let combined = match deeper {
            Some(d) => {
                let up = g.upsample_nearest2(d);
                let proj = bank.conv_node(g, &format!("{prefix}.proj"), up)?;
                g.add(lateral, proj)?
            }
            None => lateral,
        };
        let smoothed = bank.conv_node(g, &format!("{prefix}.smooth"), combined)?;
        let f = g.leaky_relu(smoothed, slope)?;
        topdown_rev.push(f);
        deeper = Some(f);
    }
    topdown_rev.reverse();
    Ok(topdown_rev)
}

/// Bottom-up pass: the shallowest map passes through; each deeper map is
/// bi-fused with the previous bottom-up result.
pub fn bottomup_graph(
    g: &mut Graph,
    bank: &mut impl ConvBank,
    topdown: &[VarId],
) -> Result<Vec<VarId>, PyramidError> {
    let mut out = Vec::with_capacity(topdown.len());
    out.push(topdown[0]);
    for i in 1..topdown.len() {
        let fused = bfm_graph(
            g,
            bank,
            &format!("bfm.s{}.fuse", i + 1),
            out[i - 1],
            topdown[i],
        )?;
        out.push(fused);
    }
    Ok(out)
}
