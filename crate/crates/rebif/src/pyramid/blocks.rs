//! Parameter bundles for the fusion blocks and tensor-level forwards.
//!
//! Each struct validates its internal width chain at construction; the
//! forwards here wrap the tape builders in [`super::graphs`] so block
//! semantics have exactly one implementation. `seeded` constructors follow
//! the standard pyramid wiring: the fusion core projects its concatenated
//! bundle to twice the scale width, purification halves that back down, and
//! the residual skip is the identity.

use crate::tensor::graph::Graph;
use crate::tensor::ops::ConvParams;
use crate::tensor::rng::Rng;
use crate::tensor::{Shape4, Tensor4};

use super::graphs::{self, ParamConvBank};
use super::{PyramidConfig, PyramidError};

fn expect_geometry(
    p: &ConvParams,
    layer: &'static str,
    k: usize,
    padding: usize,
) -> Result<(), PyramidError> {
    let expected = if k == 1 {
        "1x1, stride 1, unpadded"
    } else {
        "3x3, stride 1, padding 1"
    };
    if p.k() != k || p.stride != 1 || p.padding != padding {
        return Err(PyramidError::LayerGeometry { layer, expected });
    }
    Ok(())
}

/// One purification stage: a 1x1 bottleneck followed by a 3x3 refiner.
#[derive(Clone, Debug, PartialEq)]
pub struct PurifyStage {
    pub bottleneck: ConvParams,
    pub conv3: ConvParams,
}

/// Two-stage channel refiner. The first stage's bottleneck halves the
/// channel count (`D -> D/2`); everything after preserves it, so the module
/// maps `D` channels to `D/2` at unchanged spatial dims.
#[derive(Clone, Debug, PartialEq)]
pub struct PurificationParams {
    pub stage1: PurifyStage,
    pub stage2: PurifyStage,
}

impl PurificationParams {
    pub fn new(stage1: PurifyStage, stage2: PurifyStage) -> Result<Self, PyramidError> {
        let d = stage1.bottleneck.c_in();
        if !d.is_multiple_of(2) {
            return Err(PyramidError::BadWidth { index: 0, width: d });
        }
        expect_geometry(&stage1.bottleneck, "purification stage-1 bottleneck", 1, 0)?;
        expect_geometry(&stage1.conv3, "purification stage-1 refiner", 3, 1)?;
        expect_geometry(&stage2.bottleneck, "purification stage-2 bottleneck", 1, 0)?;
        expect_geometry(&stage2.conv3, "purification stage-2 refiner", 3, 1)?;
        let half = d / 2;
        let chain: [(&'static str, usize, usize); 7] = [
            ("purification stage-1 bottleneck output", stage1.bottleneck.c_out(), half),
            ("purification stage-1 refiner input", stage1.conv3.c_in(), half),
            ("purification stage-1 refiner output", stage1.conv3.c_out(), half),
            ("purification stage-2 bottleneck input", stage2.bottleneck.c_in(), half),
            ("purification stage-2 bottleneck output", stage2.bottleneck.c_out(), half),
            ("purification stage-2 refiner input", stage2.conv3.c_in(), half),
            ("purification stage-2 refiner output", stage2.conv3.c_out(), half),
        ];
        for (what, got, expected) in chain {
            if got != expected {
                return Err(PyramidError::WidthMismatch { what, expected, got });
            }
        }
        Ok(PurificationParams { stage1, stage2 })
    }

    /// He-initialized standard wiring for an even input width.
    pub fn seeded(c_in: usize, rng: &mut Rng) -> Result<Self, PyramidError> {
        let half = c_in / 2;
        let stage = |cin: usize, rng: &mut Rng| -> Result<PurifyStage, PyramidError> {
            Ok(PurifyStage {
                bottleneck: ConvParams::he_init(half, cin, 1, 1, 0, rng)
                    .map_err(PyramidError::Tensor)?,
                conv3: ConvParams::he_init(half, half, 3, 1, 1, rng)
                    .map_err(PyramidError::Tensor)?,
            })
        };
        let stage1 = stage(c_in, &mut rng.fork("stage1"))?;
        let stage2 = stage(half, &mut rng.fork("stage2"))?;
        PurificationParams::new(stage1, stage2)
    }

    /// All-zero weights and biases, the degenerate refiner whose output is
    /// identically zero.
    pub fn zeros(c_in: usize) -> Result<Self, PyramidError> {
        let half = c_in / 2;
        let stage = |cin: usize| -> Result<PurifyStage, PyramidError> {
            Ok(PurifyStage {
                bottleneck: ConvParams::zeros(half, cin, 1, 1, 0).map_err(PyramidError::Tensor)?,
                conv3: ConvParams::zeros(half, half, 3, 1, 1).map_err(PyramidError::Tensor)?,
            })
        };
        PurificationParams::new(stage(c_in)?, stage(half)?)
    }

    pub fn input_width(&self) -> usize {
        self.stage1.bottleneck.c_in()
    }

    pub fn output_width(&self) -> usize {
        self.stage2.conv3.c_out()
    }

    pub(crate) fn register<'a>(&'a self, bank: &mut ParamConvBank<'a>, prefix: &str) {
        bank.insert(format!("{prefix}.stage1.bottleneck"), &self.stage1.bottleneck);
        bank.insert(format!("{prefix}.stage1.conv3"), &self.stage1.conv3);
        bank.insert(format!("{prefix}.stage2.bottleneck"), &self.stage2.bottleneck);
        bank.insert(format!("{prefix}.stage2.conv3"), &self.stage2.conv3);
    }
}

/// Fusion-core parameters: the 1x1 mix applied to the concatenated bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct CoreParams {
    pub post_fuse: ConvParams,
}

impl CoreParams {
    pub fn new(post_fuse: ConvParams) -> Result<Self, PyramidError> {
        expect_geometry(&post_fuse, "core post-fuse", 1, 0)?;
        Ok(CoreParams { post_fuse })
    }

    pub fn seeded(bundle_c_in: usize, c_out: usize, rng: &mut Rng) -> Result<Self, PyramidError> {
        CoreParams::new(
            ConvParams::he_init(c_out, bundle_c_in, 1, 1, 0, rng).map_err(PyramidError::Tensor)?,
        )
    }

    pub(crate) fn register<'a>(&'a self, bank: &mut ParamConvBank<'a>, prefix: &str) {
        bank.insert(format!("{prefix}.post_fuse"), &self.post_fuse);
    }
}

/// Residual fusion parameters: the core, its purifier, and an optional 1x1
/// skip projection (present only when the skip width differs from the
/// increment width; the standard pyramid never needs one).
#[derive(Clone, Debug, PartialEq)]
pub struct ReCoreParams {
    pub core: CoreParams,
    pub purify: PurificationParams,
    pub skip_proj: Option<ConvParams>,
}

impl ReCoreParams {
    pub fn new(
        core: CoreParams,
        purify: PurificationParams,
        skip_proj: Option<ConvParams>,
    ) -> Result<Self, PyramidError> {
        if purify.input_width() != core.post_fuse.c_out() {
            return Err(PyramidError::WidthMismatch {
                what: "purification input",
                expected: core.post_fuse.c_out(),
                got: purify.input_width(),
            });
        }
        if let Some(sp) = &skip_proj {
            expect_geometry(sp, "skip projection", 1, 0)?;
            if sp.c_out() != purify.output_width() {
                return Err(PyramidError::SkipWidth {
                    skip: sp.c_out(),
                    delta: purify.output_width(),
                });
            }
        }
        Ok(ReCoreParams {
            core,
            purify,
            skip_proj,
        })
    }

    /// Standard wiring for a scale of the given width: the bundle mixes
    /// `4 * shallow + width + deep` channels down to `2 * width`,
    /// purification halves that to `width`, and the skip is the identity.
    pub fn seeded(
        shallow_width: Option<usize>,
        width: usize,
        deep_width: Option<usize>,
        rng: &mut Rng,
    ) -> Result<Self, PyramidError> {
        let bundle = shallow_width.map_or(0, |w| 4 * w) + width + deep_width.unwrap_or(0);
        let core = CoreParams::seeded(bundle, 2 * width, &mut rng.fork("core"))?;
        let purify = PurificationParams::seeded(2 * width, &mut rng.fork("purify"))?;
        ReCoreParams::new(core, purify, None)
    }

    pub(crate) fn register<'a>(&'a self, bank: &mut ParamConvBank<'a>, prefix: &str) {
        self.core.register(bank, &format!("{prefix}.core"));
        self.purify.register(bank, &format!("{prefix}.purify"));
        if let Some(sp) = &self.skip_proj {
            bank.insert(format!("{prefix}.skip_proj"), sp);
        }
    }
}

/// Bi-fusion parameters: the learned 1x1 mix of four sub-patches of the
/// shallower map with the deeper map.
#[derive(Clone, Debug, PartialEq)]
pub struct BfmParams {
    pub fuse: ConvParams,
}

impl BfmParams {
    pub fn new(fuse: ConvParams) -> Result<Self, PyramidError> {
        expect_geometry(&fuse, "bi-fusion mix", 1, 0)?;
        Ok(BfmParams { fuse })
    }

    pub fn seeded(
        high_width: usize,
        low_width: usize,
        rng: &mut Rng,
    ) -> Result<Self, PyramidError> {
        BfmParams::new(
            ConvParams::he_init(low_width, 4 * high_width + low_width, 1, 1, 0, rng)
                .map_err(PyramidError::Tensor)?,
        )
    }

    /// Fixed averaging fusion: every weight `1 / c_in`, zero bias. Each
    /// output channel is the plain mean over all fused channels; the shift
    /// study uses this as its parameter-free stand-in.
    pub fn average(high_width: usize, low_width: usize) -> Result<Self, PyramidError> {
        let c_in = 4 * high_width + low_width;
        let weight = Tensor4::filled(
            Shape4::new(low_width, c_in, 1, 1),
            1.0 / c_in as f64,
        );
        let bias = Tensor4::zeros(Shape4::new(1, low_width, 1, 1));
        BfmParams::new(ConvParams::new(weight, bias, 1, 0).map_err(PyramidError::Tensor)?)
    }
}

/// One-block tensor-level forward: purification only.
pub fn purification_forward(
    x: &Tensor4,
    p: &PurificationParams,
    slope: f64,
) -> Result<Tensor4, PyramidError> {
    let mut g = Graph::new();
    let xid = g.leaf(x.clone());
    let mut bank = ParamConvBank::new();
    p.register(&mut bank, "purify");
    let out = graphs::purification_graph(&mut g, &mut bank, "purify", xid, slope)?;
    Ok(g.value(out).clone())
}

/// One-block tensor-level forward: core fusion with optional neighbors.
pub fn core_forward(
    shallow: Option<&Tensor4>,
    current: &Tensor4,
    deep: Option<&Tensor4>,
    p: &CoreParams,
    slope: f64,
) -> Result<Tensor4, PyramidError> {
    let mut g = Graph::new();
    let s = shallow.map(|t| g.leaf(t.clone()));
    let c = g.leaf(current.clone());
    let d = deep.map(|t| g.leaf(t.clone()));
    let mut bank = ParamConvBank::new();
    p.register(&mut bank, "core");
    let out = graphs::core_graph(&mut g, &mut bank, "core", s, c, d, slope)?;
    Ok(g.value(out).clone())
}

/// One-block tensor-level forward: residual fusion. Returns `(F, delta)`
/// with `F = skip(current) + delta`, so callers can assert the residual
/// identity directly.
pub fn recore_forward(
    shallow: Option<&Tensor4>,
    current: &Tensor4,
    deep: Option<&Tensor4>,
    p: &ReCoreParams,
    slope: f64,
) -> Result<(Tensor4, Tensor4), PyramidError> {
    let mut g = Graph::new();
    let s = shallow.map(|t| g.leaf(t.clone()));
    let c = g.leaf(current.clone());
    let d = deep.map(|t| g.leaf(t.clone()));
    let mut bank = ParamConvBank::new();
    p.register(&mut bank, "recore");
    let (f, delta) = graphs::recore_graph(&mut g, &mut bank, "recore", s, c, d, slope)?;
    Ok((g.value(f).clone(), g.value(delta).clone()))
}

/// One-block tensor-level forward: bi-fusion of a shallower map into a
/// deeper one.
pub fn bfm_forward(
    fm_high: &Tensor4,
    fm_low: &Tensor4,
    p: &BfmParams,
) -> Result<Tensor4, PyramidError> {
    let mut g = Graph::new();
    let h = g.leaf(fm_high.clone());
    let l = g.leaf(fm_low.clone());
    let mut bank = ParamConvBank::new();
    bank.insert("bfm.fuse", &p.fuse);
    let out = graphs::bfm_graph(&mut g, &mut bank, "bfm.fuse", h, l)?;
    Ok(g.value(out).clone())
}

/// Feature maps produced by the pyramid passes over one batch.
#[derive(Clone, Debug, Default)]
pub struct PyramidState {
    pub backbone_maps: Vec<Tensor4>,
    pub topdown_maps: Vec<Tensor4>,
    /// Residual increments per scale; empty for the plain top-down pass.
    pub deltas: Vec<Tensor4>,
    /// Populated by [`bottom_up_fuse`]; empty until then.
    pub bottomup_maps: Vec<Tensor4>,
}

impl PyramidState {
    /// The maps a prediction head should read: bottom-up when that pass ran,
    /// top-down otherwise.
    pub fn features(&self) -> &[Tensor4] {
        if self.bottomup_maps.is_empty() {
            &self.topdown_maps
        } else {
            &self.bottomup_maps
        }
    }
}

/// Residual top-down pass at the tensor level: checks the maps against the
/// config, then runs the recursive fusion from the deepest scale upward.
pub fn build_residual_pyramid(
    backbone_maps: &[Tensor4],
    params: &[ReCoreParams],
    cfg: &PyramidConfig,
) -> Result<PyramidState, PyramidError> {
    cfg.validate()?;
    if backbone_maps.len() != cfg.num_scales {
        return Err(PyramidError::WrongLength {
            what: "backbone maps",
            expected: cfg.num_scales,
            got: backbone_maps.len(),
        });
    }
    if params.len() != cfg.num_scales {
        return Err(PyramidError::WrongLength {
            what: "scale parameter bundles",
            expected: cfg.num_scales,
            got: params.len(),
        });
    }
    for (i, map) in backbone_maps.iter().enumerate() {
        if map.shape().c != cfg.widths[i] {
            return Err(PyramidError::WidthMismatch {
                what: "backbone map channels",
                expected: cfg.widths[i],
                got: map.shape().c,
            });
        }
    }
    let mut g = Graph::new();
    let taps: Vec<_> = backbone_maps.iter().map(|t| g.leaf(t.clone())).collect();
    let mut bank = ParamConvBank::new();
    for (i, p) in params.iter().enumerate() {
        p.register(&mut bank, &format!("neck.s{}", i + 1));
    }
    let (topdown, deltas) =
        graphs::residual_topdown_graph(&mut g, &mut bank, &taps, cfg.leaky_slope)?;
    Ok(PyramidState {
        backbone_maps: backbone_maps.to_vec(),
        topdown_maps: topdown.iter().map(|&id| g.value(id).clone()).collect(),
        deltas: deltas.iter().map(|&id| g.value(id).clone()).collect(),
        bottomup_maps: Vec::new(),
    })
}

/// Bottom-up pass at the tensor level: bi-fuses each deeper top-down map
/// with the previous bottom-up result.
pub fn bottom_up_fuse(
    state: &PyramidState,
    bfm_params: &[BfmParams],
) -> Result<PyramidState, PyramidError> {
    if state.topdown_maps.is_empty() {
        return Err(PyramidError::MissingTopdown);
    }
    let s_count = state.topdown_maps.len();
    if bfm_params.len() != s_count - 1 {
        return Err(PyramidError::WrongLength {
            what: "bottom-up fusion bundles",
            expected: s_count - 1,
            got: bfm_params.len(),
        });
    }
    let mut g = Graph::new();
    let topdown: Vec<_> = state.topdown_maps.iter().map(|t| g.leaf(t.clone())).collect();
    let mut bank = ParamConvBank::new();
    for (i, p) in bfm_params.iter().enumerate() {
        bank.insert(format!("bfm.s{}.fuse", i + 2), &p.fuse);
    }
    let bottomup = graphs::bottomup_graph(&mut g, &mut bank, &topdown)?;
    let mut out = state.clone();
    out.bottomup_maps = bottomup.iter().map(|&id| g.value(id).clone()).collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check_many, DEFAULT_EPS};
    use crate::tensor::graph::VarId;
    use crate::tensor::ops;
    use crate::tensor::TensorError;

    use super::super::graphs::IdConvBank;

    fn seeded(shape: Shape4, seed: u64) -> Tensor4 {
        let mut rng = Rng::seeded(seed);
        let mut t = Tensor4::zeros(shape);
        for v in t.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        t
    }

    /// Flattens a parameter bundle into (name, stride, padding, tensors) so
    /// gradient checks can treat every weight and bias as a tape leaf.
    struct LeafSpec {
        name: &'static str,
        stride: usize,
        padding: usize,
    }

    fn bind_leaves(
        specs: &[(LeafSpec, &ConvParams)],
        first: usize,
        ids: &[VarId],
    ) -> IdConvBank {
        let mut bank = IdConvBank::new();
        for (i, (spec, _)) in specs.iter().enumerate() {
            bank.insert(
                spec.name,
                ids[first + 2 * i],
                ids[first + 2 * i + 1],
                spec.stride,
                spec.padding,
            );
        }
        bank
    }

    fn leaf_tensors(specs: &[(LeafSpec, &ConvParams)]) -> Vec<Tensor4> {
        specs
            .iter()
            .flat_map(|(_, p)| [p.weight.clone(), p.bias.clone()])
            .collect()
    }

    #[test]
    fn purification_halves_channels_and_keeps_spatial_dims() {
        let mut rng = Rng::seeded(81);
        let p = PurificationParams::seeded(8, &mut rng).unwrap();
        let x = seeded(Shape4::new(1, 8, 4, 4), 82);
        let y = purification_forward(&x, &p, 0.1).unwrap();
        assert_eq!(y.shape(), Shape4::new(1, 4, 4, 4), "8 channels refine to 4");
    }

    #[test]
    fn zero_purification_outputs_exactly_zero() {
        let p = PurificationParams::zeros(8).unwrap();
        let x = seeded(Shape4::new(2, 8, 4, 4), 83);
        let y = purification_forward(&x, &p, 0.1).unwrap();
        assert_eq!(y.shape(), Shape4::new(2, 4, 4, 4));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn purification_rejects_broken_width_chains() {
        let odd = PurificationParams::zeros(7);
        assert!(matches!(odd.unwrap_err(), PyramidError::BadWidth { .. }));

        // Stage-2 bottleneck that halves again (8 -> 4 -> 2) is rejected.
        let stage1 = PurifyStage {
            bottleneck: ConvParams::zeros(4, 8, 1, 1, 0).unwrap(),
            conv3: ConvParams::zeros(4, 4, 3, 1, 1).unwrap(),
        };
        let stage2 = PurifyStage {
            bottleneck: ConvParams::zeros(2, 4, 1, 1, 0).unwrap(),
            conv3: ConvParams::zeros(2, 2, 3, 1, 1).unwrap(),
        };
        assert!(matches!(
            PurificationParams::new(stage1, stage2).unwrap_err(),
            PyramidError::WidthMismatch {
                what: "purification stage-2 bottleneck output",
                ..
            }
        ));
    }

    #[test]
    fn purification_gradients_check_out_through_both_stages() {
        let mut rng = Rng::seeded(84);
        let p = PurificationParams::seeded(4, &mut rng).unwrap();
        let x = seeded(Shape4::new(1, 4, 3, 3), 85);
        let specs = [
            (LeafSpec { name: "purify.stage1.bottleneck", stride: 1, padding: 0 }, &p.stage1.bottleneck),
            (LeafSpec { name: "purify.stage1.conv3", stride: 1, padding: 1 }, &p.stage1.conv3),
            (LeafSpec { name: "purify.stage2.bottleneck", stride: 1, padding: 0 }, &p.stage2.bottleneck),
            (LeafSpec { name: "purify.stage2.conv3", stride: 1, padding: 1 }, &p.stage2.conv3),
        ];
        let mut inputs = vec![x];
        inputs.extend(leaf_tensors(&specs));
        for check in 0..inputs.len() {
            let err = grad_check_many(&inputs, check, DEFAULT_EPS, |g, ids| {
                let mut bank = bind_leaves(&specs, 1, ids);
                graphs::purification_graph(g, &mut bank, "purify", ids[0], 0.1)
                    .map_err(|e| match e {
                        PyramidError::Tensor(t) => t,
                        other => panic!("unexpected pyramid error: {other}"),
                    })
            })
            .unwrap();
            assert!(err < 1e-5, "purification leaf {check} gradient error {err}");
        }
    }

    #[test]
    fn degenerate_core_is_an_activated_channel_mix() {
        let mut rng = Rng::seeded(86);
        let p = CoreParams::seeded(3, 5, &mut rng).unwrap();
        let x = seeded(Shape4::new(1, 3, 4, 4), 87);
        let y = core_forward(None, &x, None, &p, 0.1).unwrap();
        let direct =
            ops::leaky_relu(&ops::conv2d(&x, &p.post_fuse).unwrap(), 0.1).unwrap();
        assert!(y.bits_eq(&direct));
    }

    #[test]
    fn channel_selector_core_reproduces_the_current_map() {
        // Bundle = [4 reorganized shallow, 2 current, 3 upsampled deep]; the
        // post-fuse kernel picks out exactly the current block.
        let shallow = seeded(Shape4::new(1, 1, 8, 8), 88);
        let current = seeded(Shape4::new(1, 2, 4, 4), 89);
        let deep = seeded(Shape4::new(1, 3, 2, 2), 90);
        let mut w = Tensor4::zeros(Shape4::new(2, 9, 1, 1));
        for out_c in 0..2 {
            let idx = w.shape().idx(out_c, 4 + out_c, 0, 0);
            w.data_mut()[idx] = 1.0;
        }
        let p = CoreParams::new(
            ConvParams::new(w, Tensor4::zeros(Shape4::new(1, 2, 1, 1)), 1, 0).unwrap(),
        )
        .unwrap();
        let y = core_forward(Some(&shallow), &current, Some(&deep), &p, 0.1).unwrap();
        let expected = ops::leaky_relu(&current, 0.1).unwrap();
        assert!(
            y.bits_eq(&expected),
            "selecting the current channel block must reproduce activation(current)"
        );
    }

    #[test]
    fn core_rejects_wrong_spatial_ratios_and_widths() {
        let mut rng = Rng::seeded(91);
        let p = CoreParams::seeded(9, 4, &mut rng).unwrap();
        let current = seeded(Shape4::new(1, 2, 4, 4), 92);
        let bad_shallow = seeded(Shape4::new(1, 1, 6, 6), 93);
        assert!(matches!(
            core_forward(Some(&bad_shallow), &current, None, &p, 0.1).unwrap_err(),
            PyramidError::SpatialRatio { role: "shallow", .. }
        ));

        let bad_deep = seeded(Shape4::new(1, 3, 4, 4), 94);
        assert!(matches!(
            core_forward(None, &current, Some(&bad_deep), &p, 0.1).unwrap_err(),
            PyramidError::SpatialRatio { role: "deep", .. }
        ));

        // Bundle is 2 channels but the mix expects 9.
        assert!(matches!(
            core_forward(None, &current, None, &p, 0.1).unwrap_err(),
            PyramidError::Tensor(TensorError::ChannelMismatch { expected: 9, got: 2 })
        ));
    }

    #[test]
    fn core_gradients_check_out_with_all_three_inputs() {
        // Three-scale toy: 16x16 shallow, 8x8 current, 4x4 deep.
        let shallow = seeded(Shape4::new(1, 1, 16, 16), 95);
        let current = seeded(Shape4::new(1, 2, 8, 8), 96);
        let deep = seeded(Shape4::new(1, 2, 4, 4), 97);
        let mut rng = Rng::seeded(98);
        let p = CoreParams::seeded(8, 4, &mut rng).unwrap();
        let specs = [(
            LeafSpec { name: "core.post_fuse", stride: 1, padding: 0 },
            &p.post_fuse,
        )];
        let mut inputs = vec![shallow, current, deep];
        inputs.extend(leaf_tensors(&specs));
        for check in 0..inputs.len() {
            let err = grad_check_many(&inputs, check, DEFAULT_EPS, |g, ids| {
                let mut bank = bind_leaves(&specs, 3, ids);
                graphs::core_graph(g, &mut bank, "core", Some(ids[0]), ids[1], Some(ids[2]), 0.1)
                    .map_err(|e| match e {
                        PyramidError::Tensor(t) => t,
                        other => panic!("unexpected pyramid error: {other}"),
                    })
            })
            .unwrap();
            assert!(err < 1e-5, "core leaf {check} gradient error {err}");
        }
    }

    #[test]
    fn zero_increment_residual_fusion_is_the_identity() {
        let mut rng = Rng::seeded(99);
        let core = CoreParams::seeded(4, 8, &mut rng).unwrap();
        let purify = PurificationParams::zeros(8).unwrap();
        let p = ReCoreParams::new(core, purify, None).unwrap();
        let current = seeded(Shape4::new(1, 4, 4, 4), 100);
        let (f, delta) = recore_forward(None, &current, None, &p, 0.1).unwrap();
        assert!(delta.data().iter().all(|&v| v == 0.0));
        assert!(
            f.bits_eq(&current),
            "zero increment with identity skip must return the input bit-for-bit"
        );
    }

    #[test]
    fn residual_identity_holds_for_seeded_parameters() {
        let mut rng = Rng::seeded(101);
        let p = ReCoreParams::seeded(Some(2), 4, Some(6), &mut rng).unwrap();
        let shallow = seeded(Shape4::new(1, 2, 8, 8), 102);
        let current = seeded(Shape4::new(1, 4, 4, 4), 103);
        let deep = seeded(Shape4::new(1, 6, 2, 2), 104);
        let (f, delta) = recore_forward(Some(&shallow), &current, Some(&deep), &p, 0.1).unwrap();
        let mut residual = f.clone();
        for (r, d) in residual.data_mut().iter_mut().zip(delta.data()) {
            *r -= d;
        }
        assert!(
            residual.max_abs_diff(&current).unwrap() < 1e-12,
            "F - delta must recover the skip path"
        );
    }

    #[test]
    fn skip_projection_reconciles_width_differences() {
        let mut rng = Rng::seeded(105);
        // Core mixes 6 channels to 8; purification outputs 4; the skip must
        // project 6 -> 4.
        let core = CoreParams::seeded(6, 8, &mut rng).unwrap();
        let purify = PurificationParams::seeded(8, &mut rng).unwrap();

        let no_proj = ReCoreParams::new(core.clone(), purify.clone(), None).unwrap();
        let current = seeded(Shape4::new(1, 6, 4, 4), 106);
        assert!(matches!(
            recore_forward(None, &current, None, &no_proj, 0.1).unwrap_err(),
            PyramidError::SkipWidth { skip: 6, delta: 4 }
        ));

        let proj = ConvParams::he_init(4, 6, 1, 1, 0, &mut rng).unwrap();
        let with_proj = ReCoreParams::new(core, purify, Some(proj)).unwrap();
        let (f, delta) = recore_forward(None, &current, None, &with_proj, 0.1).unwrap();
        assert_eq!(f.shape().c, 4);
        assert_eq!(delta.shape().c, 4);

        // A projection of the wrong width is rejected at construction.
        let bad_proj = ConvParams::zeros(5, 6, 1, 1, 0).unwrap();
        assert!(matches!(
            ReCoreParams::new(
                with_proj.core.clone(),
                with_proj.purify.clone(),
                Some(bad_proj)
            )
            .unwrap_err(),
            PyramidError::SkipWidth { skip: 5, delta: 4 }
        ));
    }

    #[test]
    fn residual_fusion_gradients_check_out_for_every_parameter() {
        let mut rng = Rng::seeded(107);
        let p = ReCoreParams::seeded(Some(2), 2, None, &mut rng).unwrap();
        let shallow = seeded(Shape4::new(1, 2, 6, 6), 108);
        let current = seeded(Shape4::new(1, 2, 3, 3), 109);
        let specs = [
            (LeafSpec { name: "recore.core.post_fuse", stride: 1, padding: 0 }, &p.core.post_fuse),
            (LeafSpec { name: "recore.purify.stage1.bottleneck", stride: 1, padding: 0 }, &p.purify.stage1.bottleneck),
            (LeafSpec { name: "recore.purify.stage1.conv3", stride: 1, padding: 1 }, &p.purify.stage1.conv3),
            (LeafSpec { name: "recore.purify.stage2.bottleneck", stride: 1, padding: 0 }, &p.purify.stage2.bottleneck),
            (LeafSpec { name: "recore.purify.stage2.conv3", stride: 1, padding: 1 }, &p.purify.stage2.conv3),
        ];
        let mut inputs = vec![shallow, current];
        inputs.extend(leaf_tensors(&specs));
        for check in 0..inputs.len() {
            let err = grad_check_many(&inputs, check, DEFAULT_EPS, |g, ids| {
                let mut bank = bind_leaves(&specs, 2, ids);
                graphs::recore_graph(g, &mut bank, "recore", Some(ids[0]), ids[1], None, 0.1)
                    .map(|(f, _)| f)
                    .map_err(|e| match e {
                        PyramidError::Tensor(t) => t,
                        other => panic!("unexpected pyramid error: {other}"),
                    })
            })
            .unwrap();
            assert!(err < 1e-5, "residual fusion leaf {check} gradient error {err}");
        }
    }

    #[test]
    fn one_dimensional_fusion_analog_matches_hand_arithmetic() {
        // Width-only analog of the bi-fusion mix on single-row maps: the
        // high-resolution row splits into even/odd column sub-patches, both
        // [0,1,0,1]; fusing them with the low-resolution row [1,1,1,1] under
        // uniform 1/3 weights averages the three channels.
        let fm_high = Tensor4::from_row(&[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let fm_low = Tensor4::from_row(&[1.0, 1.0, 1.0, 1.0]);
        let packed = ops::space_to_depth_w2(&fm_high).unwrap();
        assert_eq!(packed.plane(0, 0), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(packed.plane(0, 1), &[0.0, 1.0, 0.0, 1.0]);
        let bundle = ops::concat_channels(&[&packed, &fm_low]).unwrap();
        let mix = ConvParams::new(
            Tensor4::filled(Shape4::new(1, 3, 1, 1), 1.0 / 3.0),
            Tensor4::zeros(Shape4::new(1, 1, 1, 1)),
            1,
            0,
        )
        .unwrap();
        let fused = ops::conv2d(&bundle, &mix).unwrap();
        let expected = [1.0 / 3.0, 1.0, 1.0 / 3.0, 1.0];
        for (got, want) in fused.data().iter().zip(expected) {
            assert!(
                (got - want).abs() < 1e-12,
                "uniform-weight fusion arithmetic: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn zero_weight_bi_fusion_outputs_zero() {
        let p = BfmParams::new(ConvParams::zeros(2, 6, 1, 1, 0).unwrap()).unwrap();
        let fm_high = seeded(Shape4::new(1, 1, 4, 4), 110);
        let fm_low = seeded(Shape4::new(1, 2, 2, 2), 111);
        let y = bfm_forward(&fm_high, &fm_low, &p).unwrap();
        assert_eq!(y.shape(), fm_low.shape());
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bi_fusion_validates_resolution_and_channels() {
        let p = BfmParams::new(ConvParams::zeros(2, 6, 1, 1, 0).unwrap()).unwrap();
        let fm_low = seeded(Shape4::new(1, 2, 2, 2), 112);
        let same_res = seeded(Shape4::new(1, 1, 2, 2), 113);
        assert!(matches!(
            bfm_forward(&same_res, &fm_low, &p).unwrap_err(),
            PyramidError::SpatialRatio { role: "fm_high", .. }
        ));

        let wrong_c = seeded(Shape4::new(1, 2, 4, 4), 114);
        assert!(matches!(
            bfm_forward(&wrong_c, &fm_low, &p).unwrap_err(),
            PyramidError::Tensor(TensorError::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn averaging_bi_fusion_reduces_to_the_plain_mean() {
        let p = BfmParams::average(1, 1).unwrap();
        let fm_high = Tensor4::filled(Shape4::new(1, 1, 4, 4), 2.0);
        let fm_low = Tensor4::filled(Shape4::new(1, 1, 2, 2), 7.0);
        let y = bfm_forward(&fm_high, &fm_low, &p).unwrap();
        // Every output cell averages four 2.0 sub-patch values and one 7.0.
        for &v in y.data() {
            assert!((v - (4.0 * 2.0 + 7.0) / 5.0).abs() < 1e-15);
        }
    }

    fn toy_config() -> PyramidConfig {
        PyramidConfig {
            num_scales: 3,
            widths: vec![2, 4, 8],
            strides: vec![2, 4, 8],
            leaky_slope: 0.1,
        }
    }

    fn toy_params(cfg: &PyramidConfig, seed: u64) -> Vec<ReCoreParams> {
        let rng = Rng::seeded(seed);
        (0..cfg.num_scales)
            .map(|i| {
                let shallow = (i > 0).then(|| cfg.widths[i - 1]);
                let deep = (i + 1 < cfg.num_scales).then(|| cfg.widths[i + 1]);
                ReCoreParams::seeded(
                    shallow,
                    cfg.widths[i],
                    deep,
                    &mut rng.fork(&format!("neck.s{}", i + 1)),
                )
                .unwrap()
            })
            .collect()
    }

    fn toy_maps(cfg: &PyramidConfig, image: usize, seed: u64) -> Vec<Tensor4> {
        cfg.widths
            .iter()
            .zip(&cfg.strides)
            .enumerate()
            .map(|(i, (&w, &s))| {
                seeded(Shape4::new(1, w, image / s, image / s), seed + i as u64)
            })
            .collect()
    }

    #[test]
    fn pyramid_spatial_dims_follow_the_strides() {
        let cfg = PyramidConfig::standard(3).unwrap();
        let maps: Vec<Tensor4> = cfg
            .widths
            .iter()
            .zip(&cfg.strides)
            .map(|(&w, &s)| Tensor4::zeros(Shape4::new(1, w, 256 / s, 256 / s)))
            .collect();
        let rng = Rng::seeded(115);
        let params: Vec<ReCoreParams> = (0..3)
            .map(|i| {
                let shallow = (i > 0).then(|| cfg.widths[i - 1]);
                let deep = (i + 1 < 3).then(|| cfg.widths[i + 1]);
                ReCoreParams::seeded(shallow, cfg.widths[i], deep, &mut rng.fork(&format!("s{i}")))
                    .unwrap()
            })
            .collect();
        let state = build_residual_pyramid(&maps, &params, &cfg).unwrap();
        let dims: Vec<(usize, usize)> = state
            .topdown_maps
            .iter()
            .map(|t| (t.shape().h, t.shape().w))
            .collect();
        assert_eq!(dims, vec![(32, 32), (16, 16), (8, 8)]);
        for (map, &w) in state.topdown_maps.iter().zip(&cfg.widths) {
            assert_eq!(map.shape().c, w, "feature width preserved per scale");
        }
    }

    #[test]
    fn zero_increment_pyramid_returns_the_backbone_maps() {
        let cfg = PyramidConfig {
            num_scales: 2,
            widths: vec![2, 4],
            strides: vec![2, 4],
            leaky_slope: 0.1,
        };
        let rng = Rng::seeded(116);
        let params: Vec<ReCoreParams> = (0..2)
            .map(|i| {
                let shallow = (i > 0).then(|| cfg.widths[i - 1]);
                let deep = (i + 1 < 2).then(|| cfg.widths[i + 1]);
                let bundle =
                    shallow.map_or(0, |w| 4 * w) + cfg.widths[i] + deep.unwrap_or(0);
                let core =
                    CoreParams::seeded(bundle, 2 * cfg.widths[i], &mut rng.fork(&format!("s{i}")))
                        .unwrap();
                let purify = PurificationParams::zeros(2 * cfg.widths[i]).unwrap();
                ReCoreParams::new(core, purify, None).unwrap()
            })
            .collect();
        let maps = toy_maps(&cfg, 8, 117);
        let state = build_residual_pyramid(&maps, &params, &cfg).unwrap();
        for (topdown, tap) in state.topdown_maps.iter().zip(&maps) {
            assert!(topdown.bits_eq(tap), "zero increments must pass taps through");
        }
        for delta in &state.deltas {
            assert!(delta.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn every_backbone_map_receives_gradient() {
        let cfg = toy_config();
        let params = toy_params(&cfg, 118);
        let maps = toy_maps(&cfg, 16, 119);

        let mut g = Graph::new();
        let taps: Vec<_> = maps.iter().map(|t| g.leaf(t.clone())).collect();
        let mut bank = ParamConvBank::new();
        for (i, p) in params.iter().enumerate() {
            p.register(&mut bank, &format!("neck.s{}", i + 1));
        }
        let (topdown, _) =
            graphs::residual_topdown_graph(&mut g, &mut bank, &taps, 0.1).unwrap();
        // Reduce all maps to one scalar-ish root via chained sums.
        let bottomup_root = topdown
            .iter()
            .skip(1)
            .fold(topdown[0], |acc, &f| {
                let pooled = g.maxpool2(acc).unwrap();
                // Align widths by concatenation instead of addition.
                g.concat_channels(&[pooled, f]).unwrap()
            });
        g.backward_ones(bottomup_root).unwrap();
        for (i, &tap) in taps.iter().enumerate() {
            let grad = g.grad(tap).expect("gradient must reach every backbone map");
            assert!(
                grad.data().iter().any(|&v| v != 0.0),
                "backbone map {i} received an all-zero gradient"
            );
        }
    }

    #[test]
    fn pass_through_bottom_up_fusion_reproduces_topdown_maps() {
        let cfg = PyramidConfig {
            num_scales: 2,
            widths: vec![2, 4],
            strides: vec![2, 4],
            leaky_slope: 0.1,
        };
        let params = toy_params(&cfg, 120);
        let maps = toy_maps(&cfg, 8, 121);
        let state = build_residual_pyramid(&maps, &params, &cfg).unwrap();

        // Fuse weights select the fm_low block (last 4 of 4*2+4=12 channels).
        let mut w = Tensor4::zeros(Shape4::new(4, 12, 1, 1));
        for out_c in 0..4 {
            let idx = w.shape().idx(out_c, 8 + out_c, 0, 0);
            w.data_mut()[idx] = 1.0;
        }
        let bfm = BfmParams::new(
            ConvParams::new(w, Tensor4::zeros(Shape4::new(1, 4, 1, 1)), 1, 0).unwrap(),
        )
        .unwrap();
        let fused = bottom_up_fuse(&state, &[bfm]).unwrap();
        assert!(fused.bottomup_maps[0].bits_eq(&state.topdown_maps[0]));
        assert!(
            fused.bottomup_maps[1].bits_eq(&state.topdown_maps[1]),
            "a pass-through fuse kernel must reproduce the deeper top-down map"
        );
        assert_eq!(fused.features().len(), 2);
        assert!(fused.features()[1].bits_eq(&fused.bottomup_maps[1]));
    }

    #[test]
    fn bottom_up_shapes_match_topdown_shapes_for_all_scale_counts() {
        for s in 2..=5 {
            let widths: Vec<usize> = (0..s).map(|i| 2 << i).collect();
            let strides: Vec<usize> = (0..s).map(|i| 2 << i).collect();
            let cfg = PyramidConfig {
                num_scales: s,
                widths: widths.clone(),
                strides,
                leaky_slope: 0.1,
            };
            let params = toy_params(&cfg, 130 + s as u64);
            let maps = toy_maps(&cfg, 2 << s, 140 + s as u64);
            let state = build_residual_pyramid(&maps, &params, &cfg).unwrap();
            let rng = Rng::seeded(150 + s as u64);
            let bfms: Vec<BfmParams> = (1..s)
                .map(|i| {
                    BfmParams::seeded(widths[i - 1], widths[i], &mut rng.fork(&format!("s{i}")))
                        .unwrap()
                })
                .collect();
            let fused = bottom_up_fuse(&state, &bfms).unwrap();
            for (b, t) in fused.bottomup_maps.iter().zip(&fused.topdown_maps) {
                assert_eq!(b.shape(), t.shape(), "S={s}");
            }
        }
    }

    #[test]
    fn build_rejects_mismatched_inputs() {
        let cfg = toy_config();
        let params = toy_params(&cfg, 160);
        let mut maps = toy_maps(&cfg, 16, 161);
        maps.pop();
        assert!(matches!(
            build_residual_pyramid(&maps, &params, &cfg).unwrap_err(),
            PyramidError::WrongLength { what: "backbone maps", .. }
        ));

        let mut maps = toy_maps(&cfg, 16, 162);
        maps[1] = seeded(Shape4::new(1, 6, 4, 4), 163);
        assert!(matches!(
            build_residual_pyramid(&maps, &params, &cfg).unwrap_err(),
            PyramidError::WidthMismatch { what: "backbone map channels", expected: 4, got: 6 }
        ));

        let state = PyramidState::default();
        assert_eq!(
            bottom_up_fuse(&state, &[]).unwrap_err(),
            PyramidError::MissingTopdown
        );
    }
}
