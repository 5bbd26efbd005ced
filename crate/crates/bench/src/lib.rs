//! Experiment harness around `slicequant`: synthetic data, the toy model,
//! checkpoints, elastic sweeps and migration analysis.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod eval;
pub mod pipeline;
pub mod report;

use thiserror::Error;

use slicequant::QuantError;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Check(String),
}

impl BenchError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            BenchError::Config(_) => "config",
            BenchError::Quant(_) => "quant",
            BenchError::Checkpoint(_) => "checkpoint",
            BenchError::Io { .. } => "io",
            BenchError::Csv(_) => "csv",
            BenchError::Json(_) => "json",
            BenchError::Check(_) => "check",
        }
    }

    /// Offending config field, when there is one.
    pub fn field(&self) -> Option<&str> {
        match self {
            BenchError::Config(e) => Some(&e.path),
            BenchError::Checkpoint(checkpoint::CheckpointError::Config(e)) => Some(&e.path),
            _ => None,
        }
    }
}
