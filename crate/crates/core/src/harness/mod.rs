//! Experiment plumbing: synthetic scenes, configuration, checkpoints,
//! rate-distortion sweeps and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod experiment;
pub mod scene;

use thiserror::Error;

use crate::cache::CacheError;
use crate::codec::CodecError;
use crate::field::FieldError;
use crate::metrics::MetricsError;
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<CacheError> for HarnessError {
    fn from(e: CacheError) -> Self {
        match e {
            CacheError::Codec(CodecError::Unavailable(m)) => HarnessError::Unavailable(m),
            other => HarnessError::Train(TrainError::Cache(other)),
        }
    }
}
