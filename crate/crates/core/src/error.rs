use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MitpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MitpError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: reduction over an empty axis")]
    EmptyAxis { op: &'static str },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("parameter `{0}` is trainable but has no gradient")]
    MissingGradient(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("config syntax error at line {line}, column {column}: {msg}")]
    ConfigSyntax { line: usize, column: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("weight file: {0}")]
    WeightFile(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {source}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        #[source]
        source: Box<MitpError>,
    },

    #[error("census mismatch in group {group}: enumerated {enumerated}, closed form {expected}")]
    Census {
        group: String,
        enumerated: usize,
        expected: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MitpError {
    /// Errors caused by the content of a config file rather than by a run.
    pub fn is_config_error(&self) -> bool {
        matches!(self, MitpError::Config(_) | MitpError::ConfigSyntax { .. })
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        MitpError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        MitpError::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
