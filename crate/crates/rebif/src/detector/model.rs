//! Full-model composition: backbone taps, fusion neck, prediction heads.
//!
//! [`ModelSpec`] fixes everything about a model except its weights; its
//! [`ModelSpec::full_plan`] is the single source of layer names and
//! geometry, so a parameter store initialized from the plan always matches
//! the forward graph. Heads are plain 1x1 convolutions emitting raw logits
//! in the [`HeadLayout`] channel order.

use crate::pyramid::cost::LayerPlan;
use crate::pyramid::graphs::{self, ConvBank};
use crate::pyramid::store::{ParamStore, StoreBank};
use crate::pyramid::{cost, PyramidConfig, Variant};
use crate::tensor::graph::{Graph, VarId};
use crate::tensor::rng::Rng;
use crate::tensor::Tensor4;

use super::anchors::AnchorSet;
use super::backbone;
use super::{DetectorError, HeadLayout};

/// Everything about a model except its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub pyramid: PyramidConfig,
    pub variant: Variant,
    pub image_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub anchors: AnchorSet,
}

impl ModelSpec {
    /// Standard ladder at the given scale count with 3 square anchors per
    /// scale and grayscale input.
    pub fn standard(
        num_scales: usize,
        variant: Variant,
        image_size: usize,
        num_classes: usize,
    ) -> Result<ModelSpec, DetectorError> {
        let pyramid = PyramidConfig::standard(num_scales).map_err(DetectorError::Pyramid)?;
        let anchors = AnchorSet::standard(&pyramid, image_size)?;
        Ok(ModelSpec {
            pyramid,
            variant,
            image_size,
            in_channels: 1,
            num_classes,
            anchors,
        })
    }

    pub fn head_layout(&self) -> HeadLayout {
        HeadLayout {
            anchors_per_scale: (0..self.anchors.num_scales())
                .map(|i| self.anchors.at(i).len())
                .collect(),
            num_classes: self.num_classes,
        }
    }

    /// Per-scale feature grid as `(rows, cols)`.
    pub fn feature_dims(&self) -> Vec<(usize, usize)> {
        self.pyramid.feature_dims(self.image_size)
    }

    /// One 1x1 prediction conv per scale, reading the fused feature map.
    pub fn head_plan(&self) -> Vec<LayerPlan> {
        let layout = self.head_layout();
        self.feature_dims()
            .iter()
            .enumerate()
            .map(|(i, &(h, w))| {
                LayerPlan::conv(
                    format!("head.s{}", i + 1),
                    self.pyramid.widths[i],
                    layout.channels(i),
                    1,
                    1,
                    0,
                    h,
                    w,
                )
            })
            .collect()
    }

    /// The complete layer plan: backbone stages, the variant's neck passes,
    /// then the heads. Checkpoints and weight updates follow this order.
    pub fn full_plan(&self) -> Result<Vec<LayerPlan>, DetectorError> {
        let mut plan = backbone::backbone_plan(&self.pyramid, self.image_size, self.in_channels)?;
        plan.extend(
            cost::variant_neck_plan(&self.pyramid, self.variant, self.image_size)
                .map_err(DetectorError::Pyramid)?,
        );
        plan.extend(self.head_plan());
        Ok(plan)
    }
}

/// Appends the whole model to the tape: backbone, the variant's top-down
/// (and optionally bottom-up) pass, and the per-scale heads. Returns the raw
/// head maps, shallowest scale first.
pub fn model_graph(
    g: &mut Graph,
    bank: &mut impl ConvBank,
    image: VarId,
    spec: &ModelSpec,
) -> Result<Vec<VarId>, DetectorError> {
    let taps = backbone::backbone_graph(g, bank, image, &spec.pyramid)?;
    let topdown = if spec.variant.residual_topdown() {
        graphs::residual_topdown_graph(g, bank, &taps, spec.pyramid.leaky_slope)
            .map_err(DetectorError::Pyramid)?
            .0
    } else {
        graphs::plain_topdown_graph(g, bank, &taps, spec.pyramid.leaky_slope)
            .map_err(DetectorError::Pyramid)?
    };
    let features = if spec.variant.bottom_up() {
        graphs::bottomup_graph(g, bank, &topdown).map_err(DetectorError::Pyramid)?
    } else {
        topdown
    };
    features
        .iter()
        .enumerate()
        .map(|(i, &f)| Ok(bank.conv_node(g, &format!("head.s{}", i + 1), f)?))
        .collect()
}

/// A spec plus its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
}

impl Model {
    /// Fresh He-initialized weights, deterministic per seed.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Model, DetectorError> {
        let plan = spec.full_plan()?;
        let store = ParamStore::init_from_plan(&plan, &Rng::seeded(seed))
            .map_err(DetectorError::Pyramid)?;
        Ok(Model { spec, store })
    }

    /// Wraps existing weights (e.g. a loaded checkpoint), verifying they
    /// match the spec's plan exactly.
    pub fn from_store(spec: ModelSpec, store: ParamStore) -> Result<Model, DetectorError> {
        let plan = spec.full_plan()?;
        store
            .check_against_plan(&plan)
            .map_err(DetectorError::Pyramid)?;
        Ok(Model { spec, store })
    }

    /// Tensor-level forward: raw head maps for a batch of images.
    pub fn predict(&self, images: &Tensor4) -> Result<Vec<Tensor4>, DetectorError> {
        let mut g = Graph::new();
        let mut bank = StoreBank::bind(&mut g, &self.store);
        let image = g.leaf(images.clone());
        let heads = model_graph(&mut g, &mut bank, image, &self.spec)?;
        Ok(heads.iter().map(|&id| g.value(id).clone()).collect())
    }
}
