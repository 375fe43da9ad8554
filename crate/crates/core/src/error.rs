use std::path::PathBuf;

use thiserror::Error;

use crate::data::IdxError;
use crate::store::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activations in layer {layer}")]
    NumericOverflow { layer: usize },

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    TrainingDiverged { epoch: usize },

    #[error("mask refinement cannot grow a mask: {current} kept, {requested} requested")]
    Monotonicity { current: usize, requested: usize },

    #[error("interface error: {0}")]
    Interface(String),

    #[error("merge error: {0}")]
    Merge(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("IRP iteration {iteration}: {source}")]
    Irp { iteration: usize, source: Box<Error> },

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("I/O error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

/// Coarse grouping used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Parse,
    Numeric,
    Io,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Shape(_) | Error::Interface(_) | Error::Monotonicity { .. } | Error::Merge(_) => {
                ErrorClass::Config
            }
            Error::Data(_) => ErrorClass::Config,
            Error::NumericOverflow { .. } | Error::TrainingDiverged { .. } => ErrorClass::Numeric,
            Error::Idx(_) | Error::Checkpoint(_) => ErrorClass::Parse,
            Error::Io { .. } | Error::Csv(_) => ErrorClass::Io,
            Error::Irp { source, .. } => source.class(),
        }
    }
}
