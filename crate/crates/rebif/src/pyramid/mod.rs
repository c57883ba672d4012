//! Fusion blocks and pyramid builders.
//!
//! The pyramid refines a ladder of backbone feature maps (shallowest first,
//! spatial resolution halving and channel width doubling as scales deepen)
//! in up to two passes:
//!
//! - a top-down pass, either the classic lateral/smooth scheme
//!   ([`graphs::plain_topdown_graph`]) or the residual fusion scheme built
//!   from CORE + Purification blocks where each scale adds a learned
//!   increment to its backbone tap (`F_i = skip(tap_i) + delta_i`);
//! - an optional bottom-up pass that re-fuses each deeper scale with the
//!   sub-patch reorganization of the shallower result (the bi-fusion module,
//!   BFM).
//!
//! [`blocks`] holds the parameter bundles and tensor-level forwards for each
//! block, [`graphs`] the tape builders that compose them, [`cost`] the
//! MAC/parameter accounting, and [`store`] the named parameter store with
//! its checkpoint text format.

pub mod blocks;
pub mod cost;
pub mod graphs;
pub mod store;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum PyramidError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("scale count {s} is outside [2, 5]")]
    ScaleCount { s: usize },
    #[error("expected {expected} {what}, got {got}")]
    WrongLength {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("width at scale {index} must be a positive even number, got {width}")]
    BadWidth { index: usize, width: usize },
    #[error("strides must strictly double: stride[{index}] = {got}, expected {expected}")]
    BadStride {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("{role} input must be {factor}x the current spatial dims ({expected}), got {got}")]
    SpatialRatio {
        role: &'static str,
        factor: &'static str,
        expected: String,
        got: String,
    },
    #[error("{what}: expected {expected} channels, got {got}")]
    WidthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("skip path has {skip} channels but the increment has {delta}; add a skip projection")]
    SkipWidth { skip: usize, delta: usize },
    #[error("no parameters registered under {name:?}")]
    UnknownLayer { name: String },
    #[error("layer {name:?} bound twice in one forward pass")]
    DuplicateLayer { name: String },
    #[error("{layer} must be a {expected} layer")]
    LayerGeometry {
        layer: &'static str,
        expected: &'static str,
    },
    #[error("bottom-up fusion requires a completed top-down pass")]
    MissingTopdown,
    #[error("image size {image} is not divisible by the deepest stride {stride}")]
    ImageSize { image: usize, stride: usize },
}

/// Which fusion passes the model runs and which pass feeds the heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Classic lateral + smooth top-down pyramid.
    PlainFpn,
    /// Residual CORE/Purification top-down pyramid.
    ReCore,
    /// Plain top-down plus the BFM bottom-up pass.
    Bfm,
    /// Residual top-down plus the BFM bottom-up pass.
    ReCoreBfm,
}

impl Variant {
    /// All variants in canonical report order (plain first, full model last).
    pub const ALL: [Variant; 4] = [
        Variant::PlainFpn,
        Variant::ReCore,
        Variant::Bfm,
        Variant::ReCoreBfm,
    ];

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "plain-fpn" => Some(Variant::PlainFpn),
            "recore" => Some(Variant::ReCore),
            "bfm" => Some(Variant::Bfm),
            "recore+bfm" => Some(Variant::ReCoreBfm),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::PlainFpn => "plain-fpn",
            Variant::ReCore => "recore",
            Variant::Bfm => "bfm",
            Variant::ReCoreBfm => "recore+bfm",
        }
    }

    /// Whether the top-down pass uses the residual fusion blocks.
    pub fn residual_topdown(self) -> bool {
        matches!(self, Variant::ReCore | Variant::ReCoreBfm)
    }

    /// Whether the bottom-up BFM pass runs (and feeds the heads).
    pub fn bottom_up(self) -> bool {
        matches!(self, Variant::Bfm | Variant::ReCoreBfm)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Scale layout of a pyramid: how many scales, their channel widths
/// (shallowest first) and their strides relative to the input image.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidConfig {
    pub num_scales: usize,
    /// Channel width per scale, shallowest first; all even.
    pub widths: Vec<usize>,
    /// Input stride per scale; strictly doubling.
    pub strides: Vec<usize>,
    pub leaky_slope: f64,
}

impl PyramidConfig {
    /// The standard ladder for a given scale count: strides double from 8
    /// (from 4 when five scales must fit a small image) and each scale's
    /// width is four times its stride.
    pub fn standard(num_scales: usize) -> Result<PyramidConfig, PyramidError> {
        if !(2..=5).contains(&num_scales) {
            return Err(PyramidError::ScaleCount { s: num_scales });
        }
        let first_stride = if num_scales == 5 { 4 } else { 8 };
        let strides: Vec<usize> = (0..num_scales).map(|i| first_stride << i).collect();
        let widths: Vec<usize> = strides.iter().map(|s| 4 * s).collect();
        let cfg = PyramidConfig {
            num_scales,
            widths,
            strides,
            leaky_slope: 0.1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PyramidError> {
        if !(2..=5).contains(&self.num_scales) {
            return Err(PyramidError::ScaleCount { s: self.num_scales });
        }
        if self.widths.len() != self.num_scales {
            return Err(PyramidError::WrongLength {
                what: "widths",
                expected: self.num_scales,
                got: self.widths.len(),
            });
        }
        if self.strides.len() != self.num_scales {
            return Err(PyramidError::WrongLength {
                what: "strides",
                expected: self.num_scales,
                got: self.strides.len(),
            });
        }
        for (i, &w) in self.widths.iter().enumerate() {
            if w == 0 || w % 2 != 0 {
                return Err(PyramidError::BadWidth { index: i, width: w });
            }
        }
        if self.strides[0] == 0 {
            return Err(PyramidError::BadStride {
                index: 0,
                expected: 1,
                got: 0,
            });
        }
        for i in 1..self.num_scales {
            if self.strides[i] != 2 * self.strides[i - 1] {
                return Err(PyramidError::BadStride {
                    index: i,
                    expected: 2 * self.strides[i - 1],
                    got: self.strides[i],
                });
            }
        }
        Ok(())
    }

    /// Feature-map spatial dims per scale for a square input image.
    pub fn feature_dims(&self, image_size: usize) -> Vec<(usize, usize)> {
        self.strides
            .iter()
            .map(|s| (image_size / s, image_size / s))
            .collect()
    }
}
