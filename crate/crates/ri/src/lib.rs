//! Host-side half of the RI predictor: the `RITC` dataset and `RIF1`
//! checkpoint files, run configuration, the training loop, evaluation and
//! analysis reports, and the `ri` command-line driver built on them.

use std::path::{Path, PathBuf};

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod dataset;
pub mod evaluate;
pub mod format;
pub mod report;
pub mod train;

pub use config::RunConfig;
pub use format::FormatError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: FormatError },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] ri_core::Error),

    #[error("checkpoint does not fit the configuration: {0}")]
    Mismatch(String),

    #[error(
        "non-finite loss at epoch {epoch}, step {step}: objective {objective}, cross entropy {ce}, L2 {l2}"
    )]
    NonFinite {
        epoch: usize,
        step: usize,
        objective: f64,
        ce: f64,
        l2: f64,
    },

    /// A run completed but failed its own audit.
    #[error("check failed: {0}")]
    Check(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// The message without the variant's prefix.
    pub fn detail(&self) -> String {
        match self {
            Error::Config(m) | Error::Mismatch(m) | Error::Check(m) => m.clone(),
            other => other.to_string(),
        }
    }

    /// 1 for failed checks, 2 for everything environmental.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Check(_) => 1,
            _ => 2,
        }
    }
}
