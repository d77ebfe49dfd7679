//! Experiment driver: configuration, file formats and the `generate`,
//! `train`, `eval`, `compare` and `plot` commands.

use std::path::Path;

use thiserror::Error;

pub mod commands;
pub mod config;
pub mod formats;

pub use config::RunConfig;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {detail}")]
    Format { path: String, detail: String },

    #[error("shape mismatch for `{name}`: checkpoint has {found}, model expects {expected}")]
    ShapeMismatch {
        name: String,
        expected: String,
        found: String,
    },

    #[error("{0}: no episodes")]
    EmptyEpisodeFile(String),

    #[error(transparent)]
    Core(#[from] cgnp_core::Error),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, detail: impl Into<String>) -> Self {
        CliError::Format {
            path: path.display().to_string(),
            detail: detail.into(),
        }
    }
}
