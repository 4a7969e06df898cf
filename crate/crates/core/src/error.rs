use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Structured-text parse failure with a 1-based location.
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid {field}: {message}")]
    Invalid { field: String, message: String },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("duplicate case_id {case_id} (slide {slide_id})")]
    DuplicateCase { case_id: String, slide_id: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty pathway {0}: none of its genes are in the universe")]
    EmptyPathway(String),

    #[error("case {0} has no expression profile")]
    MissingExpression(String),

    #[error("unknown case {0}")]
    UnknownCase(String),

    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,

    #[error("learning-rate step {step} exceeds total steps {total}")]
    ScheduleRange { step: usize, total: usize },

    #[error("class {class} has {count} members, fewer than {folds} folds")]
    ClassTooSmall {
        class: usize,
        count: usize,
        folds: usize,
    },

    #[error("labels contain a single class")]
    SingleClass,

    #[error("no comparable pairs")]
    NoComparablePairs,

    #[error("all differences zero")]
    AllDifferencesZero,

    #[error("need at least {needed} non-zero paired differences, got {got}")]
    TooFewPairs { needed: usize, got: usize },

    #[error("degenerate risk group: {0}")]
    DegenerateGroup(String),

    #[error("{degenerate} of {total} bootstrap resamples were degenerate")]
    DegenerateBootstrap { degenerate: usize, total: usize },

    #[error("non-finite loss term {term} at epoch {epoch}, case {case_id}")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        case_id: String,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn json(path: impl Into<String>, err: &serde_json::Error) -> Self {
        Error::Parse {
            path: path.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }
}
