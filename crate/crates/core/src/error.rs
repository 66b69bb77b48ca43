//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row}: {msg}")]
    Parse { path: PathBuf, row: usize, msg: String },

    #[error("{path}: malformed file at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("cannot decode token {0}: not a bin id")]
    Decode(u32),

    #[error("invalid hook site {0}")]
    InvalidSite(String),

    #[error("patch edit changed activation shape from {before:?} to {after:?}")]
    Patch {
        before: (usize, usize),
        after: (usize, usize),
    },

    #[error("{what} index {index} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("series `{name}` has {len} points, need at least {needed}")]
    SeriesTooShort {
        name: String,
        len: usize,
        needed: usize,
    },

    #[error("length mismatch: {what} ({left} vs {right})")]
    Length {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("missing property channels for series `{0}`")]
    MissingChannels(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("missing upstream artifact {path}: run `{stage}` first")]
    MissingUpstream { stage: &'static str, path: PathBuf },

    #[error("site mismatch: expected {expected}, found {found}")]
    SiteMismatch { expected: String, found: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingUpstream { .. } => 3,
            Error::Divergence { .. } | Error::NonFiniteGradient(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
