use thiserror::Error;

/// Errors produced across the alignment pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("value {value} outside the domain of {what}")]
    Domain { what: &'static str, value: f64 },

    #[error("unrecognized capture format: {0}")]
    Format(String),

    #[error("unsupported capture: {0}")]
    Unsupported(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),

    #[error("sample cannot be augmented: {0}")]
    NotAugmentable(&'static str),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(&'static str),

    #[error("invalid batch: {0}")]
    Batch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("duplicate class {0} in gallery")]
    DuplicateClass(usize),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged {
        epoch: usize,
        step: usize,
        last_finite: Box<crate::neural::ModelParams>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
