//! File formats, preprocessing, configuration, reports and the CLI.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod plot;
pub mod reduction;
pub mod report;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use cli::cli_main;
pub use config::RunConfig;
pub use dataset::{load_dataset, save_dataset, Dataset, DatasetFormat};
pub use reduction::{apply_reduction, fit_reduction, normalize_split, ReductionModel};

#[derive(Debug, Error)]
pub enum ShellError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("binary dataset error at byte {offset}: {message}")]
    Binary { offset: usize, message: String },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Transport(#[from] crate::transport::TransportError),

    #[error(transparent)]
    Sequencing(#[from] crate::sequencing::SequencingError),

    #[error(transparent)]
    Grouping(#[from] crate::grouping::GroupingError),

    #[error(transparent)]
    Theory(#[from] crate::theory::TheoryError),

    #[error(transparent)]
    Harness(#[from] crate::harness::HarnessError),
}

impl ShellError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ShellError::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T> = std::result::Result<T, ShellError>;
