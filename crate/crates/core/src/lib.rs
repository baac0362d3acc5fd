//! Boundary-aware context segmentation network (BA-Net) at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: rank-4 tensors, the autodiff tape, kernels and gradient checking.
//! - [`params`]: named parameter storage.
//! - [`model`]: residual encoder + ASPP, edge extraction, multi-task heads with
//!   interactive attention, cross-stage fusion and the decoder.
//! - [`loss`] and [`metrics`]: joint supervision and pixel-level scores.
//! - [`data`]: netpbm IO, synthetic lesions, edge masks and augmentation.
//! - [`train`]: SGD with momentum under a poly schedule, checkpoints, evaluation.
//! - [`config`]: the flat `key=value` run configuration.
//! - [`verify`]: self-check suites used by the `verify` command.

pub mod config;
pub mod data;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

use std::path::PathBuf;

use thiserror::Error;

pub use data::DataError;
pub use tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("checkpoint does not match the model: {}", .0.join("; "))]
    CheckpointMismatch(Vec<String>),
    #[error("non-finite {what} in {name}")]
    NonFinite { what: &'static str, name: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
