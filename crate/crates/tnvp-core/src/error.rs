//! Crate-wide error type.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the attempted operation.
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A NaN or infinity escaped a computation.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A coupling scale grew large enough that exp() would overflow.
    #[error("scale overflow in mapping unit {unit}: max |s| = {max_abs}")]
    ScaleOverflow { unit: usize, max_abs: f64 },

    /// Error raised by a specific unit inside a flow stack.
    #[error("unit {index}: {source}")]
    InUnit {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Dataset or file contents failed validation.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An operation that needs data received none.
    #[error("dataset contains no pairs")]
    EmptyDataset,

    /// Checkpoint file does not start with the expected magic bytes.
    #[error("bad magic: not a checkpoint file")]
    BadMagic,

    /// Checkpoint format version is not supported by this build.
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    /// File ended before the declared contents were read.
    #[error("truncated file: {context}")]
    Truncated { context: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn non_finite(context: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid(message.into())
    }

    /// Attach the stack-level index of the mapping unit that raised this.
    /// A lone unit reports index 0; stacks overwrite it with the real one.
    pub fn in_unit(self, index: usize) -> Self {
        match self {
            Error::ScaleOverflow { max_abs, .. } => Error::ScaleOverflow {
                unit: index,
                max_abs,
            },
            other => Error::InUnit {
                index,
                source: Box::new(other),
            },
        }
    }
}
