use std::path::PathBuf;

use thiserror::Error;

use crate::world::Patch;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("`{key}` = {value} is out of range: {bound}")]
    Range { key: String, value: String, bound: String },

    #[error("{0} is not a drivable patch")]
    NotDrivable(Patch),

    #[error("no path from {from} to {to}")]
    NoPath { from: Patch, to: Patch },

    #[error("map validation failed: {0}")]
    MapValidation(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("model load error: {0}")]
    ModelLoad(String),

    #[error("model version mismatch: expected {expected}, found {found}")]
    ModelVersion { expected: u32, found: u32 },

    #[error("training fault: {0}")]
    Training(String),

    #[error("rule violation: {0}")]
    RuleViolation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for errors caused by user input (configuration, parameters,
    /// unreadable model files) as opposed to faults during a run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Range { .. } | Error::ModelLoad(_) | Error::ModelVersion { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
