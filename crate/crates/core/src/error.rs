use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value produced in `{layer}`")]
    NumericalOverflow { layer: String },

    #[error("non-finite gradient entry for task `{task}`")]
    NonFiniteGradient { task: String },

    #[error("unknown parameter slot `{0}`")]
    UnknownSlot(String),

    #[error("unknown phase `{0}`")]
    UnknownPhase(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset `{0}` needs ingested covariates but none were supplied")]
    MissingSource(String),

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("dataset `{0}` has no counterfactual oracle")]
    UnsupportedDataset(String),

    #[error("column count mismatch: expected {expected}, found {found}")]
    ColumnMismatch { expected: usize, found: usize },

    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),

    #[error("control group has {found} units, need at least {needed}")]
    InsufficientControls { needed: usize, found: usize },

    #[error("{stage} diverged at epoch {epoch}")]
    Diverged { stage: &'static str, epoch: usize },

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dims(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            found,
        }
    }
}
