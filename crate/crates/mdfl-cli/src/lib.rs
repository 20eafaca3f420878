//! IO shell around the simulation core: experiment specs, CSV ingestion,
//! dataset directories, profile tables, the experiment runner, and report
//! generation. The `mdfl` binary wires these into subcommands.

pub mod dataset_io;
pub mod ingest;
pub mod profiles_io;
pub mod report;
pub mod runner;
pub mod spec;

use std::path::PathBuf;

use thiserror::Error;

/// Errors from the IO layer. Core errors pass through unchanged.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] mdfl_core::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("could not parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid spec: {0}")]
    Validation(String),
    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        source: csv::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
