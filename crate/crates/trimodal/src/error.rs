//! Crate-wide error type and process exit-code mapping.

use thiserror::Error;

/// Errors surfaced by every fallible operation in this crate.
///
/// The CLI maps these onto distinct process exit codes (see [`Error::exit_code`])
/// so scripted callers can tell validation problems from malformed inputs and
/// from numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An input that must carry direction or mass is degenerate,
    /// e.g. a zero-norm vector fed to cosine similarity.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A collection that must be non-empty is empty.
    #[error("empty input: {0}")]
    Empty(String),

    /// A text artifact does not follow its documented line format.
    #[error("format error in {path}{}: {msg}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Format {
        path: String,
        line: Option<usize>,
        msg: String,
    },

    /// Inputs are well-formed but mutually inconsistent
    /// (overlapping splits, unknown ids, dimension disagreements across files).
    #[error("validation error: {0}")]
    Validation(String),

    /// An artifact referenced by another artifact is missing or was mutated
    /// after its digest was recorded.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Numeric failure: non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A run configuration key or value is unusable.
    #[error("config error: {0}")]
    Config(String),

    /// An argument is outside its documented range.
    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Exit code the CLI uses for this error class.
    ///
    /// 2 = validation (including config, integrity, shape, degenerate, empty,
    /// parameter), 3 = format, 4 = numeric, 1 = everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Degenerate(_)
            | Error::Empty(_)
            | Error::Validation(_)
            | Error::Integrity(_)
            | Error::Config(_)
            | Error::Parameter(_) => 2,
            Error::Format { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
