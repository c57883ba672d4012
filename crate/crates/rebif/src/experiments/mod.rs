//! The experiment harness: synthetic datasets, the pooling-shift study,
//! deterministic training and evaluation, and the scale-sweep and module
//! ablation studies with their report tables.
//!
//! Every experiment is a pure function of its configuration and seeds:
//! images are synthesized from per-image forked streams, batch order comes
//! from seeded shuffles, and report assembly sorts rows explicitly, so
//! re-running any experiment reproduces its output byte for byte.

pub mod data;
pub mod evaluate;
pub mod shift;
pub mod sweep;
pub mod train;

use crate::detector::DetectorError;
use crate::pyramid::PyramidError;
use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum ExperimentError {
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Pyramid(#[from] PyramidError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad image data: {message}")]
    BadImage { message: String },
    #[error("label line {line}: {message}")]
    BadLabel { line: usize, message: String },
    #[error("training diverged: loss became non-finite at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("bad training configuration: {what}")]
    BadTrainConfig { what: &'static str },
    #[error("dataset is empty")]
    EmptyDataset,
}

impl ExperimentError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
