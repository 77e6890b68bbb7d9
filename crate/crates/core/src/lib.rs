//! Siamese CNN/transformer change detection on a from-scratch tensor engine.
//!
//! The pieces, bottom-up:
//!
//! - [`tensor`]: a tape-based reverse-mode autodiff engine over `f64` tensors.
//! - [`nn`] and [`blocks`]: parameterised layers, residual blocks, the
//!   convolutional transformer branch and adaptive branch fusion.
//! - [`network`]: the weight-shared encoder, decoder and classifier.
//! - [`training`]: SGD with momentum, the step schedule and the epoch loop.
//! - [`data`] and [`metrics`]: a synthetic bi-temporal benchmark and scores.
//! - [`checkpoint`], [`config`] and [`cli`]: persistence and the command set.
//!
//! [`oracle`] and [`gradcheck`] hold the naive reference implementations
//! used by the verification suite.

pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod experiments;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod oracle;
pub mod tensor;
pub mod training;
pub mod verify;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
