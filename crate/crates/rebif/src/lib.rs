//! Residual bi-fusion feature pyramids on a small exact-gradient tensor engine.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`] — dense `f64` rank-4 tensors in `(n, c, h, w)` order, the
//!   convolution/pooling/reorganization primitives with hand-derived backward
//!   rules, a reverse-mode tape for composing them, and a central-difference
//!   gradient checker used as the numerical oracle throughout the test suite.
//! - [`pyramid`] — the fusion blocks: concatenation-and-reorganization
//!   (CORE), the two-stage purification refiner, their residual form
//!   (ReCORE), the bi-fusion module (BFM) for the bottom-up pass, pyramid
//!   builders for the residual and plain-FPN variants, MAC/parameter
//!   accounting, and checkpoint text IO.
//! - [`detector`] — a deliberately small single-shot detector that serves as
//!   the measurement bench: a strided backbone with taps, per-scale 1x1
//!   prediction heads, anchor matching, the training loss, greedy NMS
//!   decoding, and average-precision metrics.
//! - [`experiments`] — synthetic shape datasets, the pooling-shift study,
//!   deterministic training and evaluation, scale sweeps and module
//!   ablations, and TSV report writing.
//! - [`config`] and [`cli`] — `key = value` run configuration with typed
//!   defaults and the command dispatch behind the `rebif` binary.
//!
//! Everything is deterministic by construction: seeded ChaCha streams, no
//! threads, fixed accumulation orders. Running the same command twice with
//! the same configuration produces byte-identical reports.

// Index-driven loops are the clearest way to write the tensor kernels and
// grid arithmetic here, where the index itself carries meaning (cell, scale,
// channel) and several arrays are indexed in lockstep.
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod config;
pub mod detector;
pub mod experiments;
pub mod pyramid;
pub mod tensor;
