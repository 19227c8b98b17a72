use alloc::string::String;
use core::fmt;

/// Errors produced by tensor math, quantizers, model construction and training.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible tensor extents (matmul inner dims, conv channels, ...).
    Shape(String),
    /// An argument violates a precondition (nonpositive step, bit-width < 2, ...).
    InvalidArg(String),
    /// NaN or infinity detected in forward data.
    NonFinite { what: String, index: usize },
    /// Autograd misuse (backward on non-scalar, uninitialized quantizer step).
    Graph(String),
    /// Checked integer accumulator overflow in the integer inference path.
    Overflow(String),
    /// Malformed binary input (dataset or model file), with the byte offset.
    Format { offset: usize, msg: String },
    /// A named tensor is missing or has the wrong shape when loading a model.
    NameMismatch(String),
    /// Operation not available for this model configuration.
    Unsupported(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::InvalidArg(m) => write!(f, "invalid argument: {m}"),
            Error::NonFinite { what, index } => {
                write!(f, "non-finite value in {what} at flat index {index}")
            }
            Error::Graph(m) => write!(f, "graph error: {m}"),
            Error::Overflow(m) => write!(f, "integer overflow: {m}"),
            Error::Format { offset, msg } => write!(f, "format error at byte {offset}: {msg}"),
            Error::NameMismatch(m) => write!(f, "named tensor mismatch: {m}"),
            Error::Unsupported(m) => write!(f, "unsupported: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
