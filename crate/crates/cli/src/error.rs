use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;
use vexel_core::codec::CodecError;
use vexel_core::conditioning::ConditioningError;
use vexel_core::svg::SvgError;
use vexel_models::config::ConfigError;
use vexel_models::ModelError;
use vexel_nn::CheckpointError;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Svg { path: PathBuf, source: SvgError },
    #[error("{path}: {source}")]
    Codec { path: PathBuf, source: CodecError },
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{failed} of {total} files failed")]
    Batch { failed: usize, total: usize },
    #[error("gradient check above tolerance: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn io(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Model(ModelError::NonFiniteLoss { .. }) | CliError::GradCheck(_) => {
                EXIT_NUMERIC
            }
            _ => EXIT_DATA,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Svg { .. } => "svg",
            CliError::Codec { .. } => "codec",
            CliError::Conditioning(_) => "features",
            CliError::Model(ModelError::NonFiniteLoss { .. }) => "non_finite_loss",
            CliError::Model(_) => "model",
            CliError::Config(_) => "config",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Batch { .. } => "batch",
            CliError::GradCheck(_) => "gradcheck",
        }
    }
}
