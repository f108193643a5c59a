//! Experiment commands and the checkpoint format for `gvae`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use checkpoint::Checkpoint;
pub use error::CliError;
