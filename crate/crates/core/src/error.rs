use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown topology `{name}` (valid: {})", valid.join(", "))]
    UnknownTopology { name: String, valid: Vec<String> },

    #[error("unknown body part `{part}` for topology {topology} (valid: {})", valid.join(", "))]
    UnknownPart {
        part: String,
        topology: String,
        valid: Vec<String>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite coordinate at frame {frame}, joint {joint}")]
    NonFinite { frame: usize, joint: usize },

    #[error("sequence has no frames (at least 1 required)")]
    EmptySequence,

    #[error("{what} = {value} is out of range [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("input too short: {actual} frames given, at least {required} required")]
    InputTooShort { required: usize, actual: usize },

    #[error("degenerate batch: batch norm needs N*L >= 2 in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("unsupported file version `{found}` (expected `{expected}`)")]
    Version { found: String, expected: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("point at frame {frame}, joint {joint} has non-positive depth {depth}")]
    NonPositiveDepth {
        frame: usize,
        joint: usize,
        depth: f64,
    },

    #[error("topology {0} has no bone lengths")]
    MissingBoneLengths(String),

    #[error("loss became non-finite at epoch {epoch}, step {step} (last finite loss {last_loss})")]
    NanLoss {
        epoch: usize,
        step: usize,
        last_loss: f64,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("classifier needs at least two classes, got {0}")]
    SingleClass(usize),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI for exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::UnknownTopology { .. } | Error::UnknownPart { .. } => "lookup",
            Error::Parse { .. } | Error::Json(_) | Error::Version { .. } => "format",
            Error::ShapeMismatch(_)
            | Error::NonFinite { .. }
            | Error::EmptySequence
            | Error::InputTooShort { .. }
            | Error::DegenerateBatch(_)
            | Error::EmptyBatch
            | Error::NonPositiveDepth { .. } => "data",
            Error::OutOfRange { .. }
            | Error::InvalidConfig(_)
            | Error::MissingBoneLengths(_)
            | Error::SingleClass(_) => "config",
            Error::NanLoss { .. } => "numeric",
            Error::File { .. } | Error::Io(_) => "io",
        }
    }
}
