use std::path::Path;

use thiserror::Error;

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] gvae_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        use gvae_core::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Checkpoint(_) | CliError::Io { .. } => EXIT_DATA,
            CliError::Core(e) => match e {
                E::NonFinite(_) => EXIT_NUMERIC,
                E::Config(_) | E::LabelOutOfRange { .. } | E::ConditionDim { .. } => EXIT_USAGE,
                _ => EXIT_DATA,
            },
        }
    }
}
