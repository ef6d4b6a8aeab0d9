use std::io;

use thiserror::Error;
use vexel_core::codec::CodecError;
use vexel_core::svg::SvgError;
use vexel_nn::{CheckpointError, NnError};

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("document has no elements")]
    EmptyDocument,
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("non-finite loss at step {step} (mse {mse}, kl {kl})")]
    NonFiniteLoss { step: u64, mse: f64, kl: f64 },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("incompatible checkpoints: {0}")]
    IncompatibleCheckpoints(String),
    #[error("{path}: {source}")]
    Svg { path: String, source: SvgError },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] io::Error),
}
