//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied parameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An input is structurally valid but degenerate (e.g. zero usable positions).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// An index or span fell outside the allowed range.
    #[error("out of bounds: {what} = {value}, valid range [{min}, {max}]")]
    Bounds {
        what: &'static str,
        value: usize,
        min: usize,
        max: usize,
    },

    /// Bad run configuration (missing teacher, empty dataset, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A corpus, embedding, or checkpoint file failed to parse.
    #[error("format error in {path} (line {line}): {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    /// Checkpoint vocabulary does not match the tokenizer it is used with.
    #[error("vocabulary mismatch: checkpoint hash {expected} != data hash {actual}")]
    VocabMismatch { expected: String, actual: String },

    /// Internal shape mismatch; indicates a bug rather than bad user input.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 for user/config mistakes, 2 for
    /// internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter(_)
            | Error::DegenerateInput(_)
            | Error::Bounds { .. }
            | Error::Config(_)
            | Error::Format { .. }
            | Error::VocabMismatch { .. }
            | Error::Io(_) => 1,
            Error::Diverged { .. } | Error::Shape(_) | Error::Json(_) => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
