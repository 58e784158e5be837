//! Crate-wide error type.
//!
//! The CLI maps variants onto exit codes: I/O failures exit 3, numeric
//! failures (NaN/Inf detected) exit 4, everything else exits 2.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that must agree do not.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Patch size does not divide the image dimensions.
    #[error("patch size {p} does not divide image dimensions {h}x{w}")]
    PatchSize { h: usize, w: usize, p: usize },

    /// An index is outside its valid range.
    #[error("index {index} out of range for {what} of size {size}")]
    Range {
        what: &'static str,
        index: usize,
        size: usize,
    },

    /// A caller violated an operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset file failed to parse.
    #[error("dataset error at {path} line {line}: {msg}")]
    Dataset {
        path: String,
        line: usize,
        msg: String,
    },

    /// A binary or text file is not in the expected format.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    /// Checkpoint version does not match this build.
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },

    /// NaN or Inf surfaced where finite values are required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
            _ => 2,
        }
    }
}
