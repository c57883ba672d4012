//! Dense rank-4 `f64` tensors and the primitives the pyramid is built from.
//!
//! Tensors are row-major in `(n, c, h, w)` order. Operations are pure
//! functions: they validate inputs, allocate a fresh output, and never mutate
//! their arguments. Each differentiable forward kernel in [`ops`] has a
//! hand-derived exact backward kernel next to it; [`graph`] composes them into
//! a reverse-mode tape, and [`gradcheck`] verifies any composition against
//! central finite differences.

pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod rng;
pub mod text;

use std::fmt;

use thiserror::Error;

/// Shape of a rank-4 tensor, `(n, c, h, w)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    /// Total number of elements.
    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Total number of elements, or `None` on overflow. Used by parsers that
    /// must not trust dimensions read from external input.
    pub fn checked_count(&self) -> Option<usize> {
        self.n
            .checked_mul(self.c)?
            .checked_mul(self.h)?
            .checked_mul(self.w)
    }

    /// Flat row-major index of `(n, c, y, x)`.
    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Errors raised by tensor constructors and primitive operations.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {got} does not match shape {shape} ({expected} values)")]
    LengthMismatch {
        shape: Shape4,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: Shape4, right: Shape4 },
    #[error("input has {got} channels but the kernel expects {expected}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("kernel size {k} is unsupported (only 1 and 3 are)")]
    UnsupportedKernel { k: usize },
    #[error("kernel must be square, got {h}x{w}")]
    NonSquareKernel { h: usize, w: usize },
    #[error("bias length {got} does not match {expected} output channels")]
    BiasMismatch { expected: usize, got: usize },
    #[error("stride must be positive")]
    ZeroStride,
    #[error(
        "convolution output size is not a positive integer for length {len} \
         with k={k}, stride={stride}, padding={padding}"
    )]
    NonIntegralOutput {
        len: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },
    #[error("spatial dims must be even, got {h}x{w}")]
    OddSpatial { h: usize, w: usize },
    #[error("width must be even, got {w}")]
    OddWidth { w: usize },
    #[error("channel count {c} is not divisible by 4")]
    ChannelNotDivisibleBy4 { c: usize },
    #[error("channel count {c} is not divisible by 2")]
    ChannelNotDivisibleBy2 { c: usize },
    #[error("cannot concatenate an empty tensor list")]
    EmptyConcat,
    #[error("concatenation inputs disagree on {axis}: {left} vs {right}")]
    ConcatMismatch {
        axis: &'static str,
        left: usize,
        right: usize,
    },
    #[error("activation slope must be non-negative, got {slope}")]
    NegativeSlope { slope: f64 },
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
}

/// A dense rank-4 tensor of `f64` values, row-major in `(n, c, h, w)` order.
///
/// This is a plain value type: gradients live on graph nodes, not here.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Tensor4 {
            shape,
            data: vec![0.0; shape.count()],
        }
    }

    pub fn filled(shape: Shape4, value: f64) -> Self {
        Tensor4 {
            shape,
            data: vec![value; shape.count()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = shape.count();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor4 { shape, data })
    }

    /// A `1 x 1 x 1 x w` tensor from a single row of values. Test fixtures
    /// and the shift study use this constantly.
    pub fn from_row(values: &[f64]) -> Self {
        Tensor4 {
            shape: Shape4::new(1, 1, 1, values.len()),
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.shape.idx(n, c, y, x);
        self.data[i] = v;
    }

    /// The `(h * w)`-long plane for image `n`, channel `c`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.shape.h * self.shape.w;
        let start = (n * self.shape.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise value equality (shape and every `f64` bit pattern).
    pub fn bits_eq(&self, other: &Tensor4) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute element-wise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor4) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    /// Element-wise `self += other`, used by gradient accumulation.
    pub fn add_assign(&mut self, other: &Tensor4) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape,
                right: other.shape,
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}
