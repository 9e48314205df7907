use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at record {record}, field `{field}`: {message}")]
    Parse {
        record: usize,
        field: String,
        message: String,
    },

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("shape mismatch in {layer}: expected {expected}, found {found}")]
    Shape {
        layer: String,
        expected: String,
        found: String,
    },

    #[error("checksum mismatch: file is corrupted")]
    Checksum,

    #[error("script waypoint {index} unreachable: ended at {reached:?}, wanted {target:?}")]
    ScriptUnreachable {
        index: usize,
        reached: crate::geometry::Pose,
        target: crate::geometry::Pose,
    },

    #[error("task success predicate false at the end of the demonstration")]
    TaskNotSolved,

    #[error("unrecoverable state: replay to waypoint {waypoint} ended {error_m:.4} m / {error_rad:.4} rad away")]
    Unrecoverable {
        waypoint: usize,
        error_m: f64,
        error_rad: f64,
    },

    #[error("dataset integrity violated: {0}")]
    Integrity(String),

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(record: usize, field: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            record,
            field: field.into(),
            message: message.to_string(),
        }
    }
}
