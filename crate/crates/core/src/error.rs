use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit can report. Variants map onto CLI exit codes
/// through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error in {file} at byte offset {offset}: {reason}")]
    Format {
        file: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("validation failed for trace '{trace_id}': {rule}")]
    Validation { trace_id: String, rule: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("section '{0}' is not present in this trace set")]
    MissingSection(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("feature layout mismatch: {0}")]
    Layout(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("model file error: {0}")]
    Model(String),

    #[error("undefined value: {0}")]
    Undefined(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(trace_id: &str, rule: impl Into<String>) -> Self {
        Error::Validation {
            trace_id: trace_id.to_string(),
            rule: rule.into(),
        }
    }

    /// Short stable name of the error class, used by reports and the C API.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Format { .. } => "format",
            Error::Validation { .. } => "validation",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::Bounds(_) => "bounds",
            Error::MissingSection(_) => "missing_section",
            Error::Config(_) => "config",
            Error::Layout(_) => "layout",
            Error::Training(_) => "training",
            Error::Divergence { .. } => "divergence",
            Error::Model(_) => "model",
            Error::Undefined(_) => "undefined",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }

    /// Process exit status: 2 for data/validation problems, 3 for training
    /// divergence. Usage errors (1) are produced by the argument parser.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 3,
            _ => 2,
        }
    }
}
