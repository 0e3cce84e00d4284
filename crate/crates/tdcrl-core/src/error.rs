use thiserror::Error;

/// Errors raised by the training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An argument is outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A step/index exceeds its schedule or table bounds.
    #[error("range error: {0}")]
    Range(String),

    /// Batch statistics are undefined (fewer than two rows in train mode).
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A serialized file is malformed; `offset` is the byte where parsing failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Configuration is missing, malformed, or violates the schema.
    #[error("config error: {0}")]
    Config(String),

    /// A conditional probability is undefined because the conditioning event has zero mass.
    #[error("singular conditional: {0}")]
    SingularConditional(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
