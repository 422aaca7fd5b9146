//! Memory-augmented multi-scale GCN motion prediction.
//!
//! The crate is organised around the training pipeline: `data` owns pose
//! sequences, the pooling hierarchy and metrics; `model` holds the encoder /
//! decoder backbone, the feature factorisation masks and the auxiliary
//! memory; `train` composes the losses, runs the optimiser and produces
//! evaluation reports. `autograd` is the small reverse-mode tape everything
//! differentiable is built on.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

use std::path::PathBuf;

/// Crate-wide error type; variants map onto the CLI exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("ingestion error: missing or unreadable file {path}: {detail}")]
    Ingestion { path: PathBuf, detail: String },
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
