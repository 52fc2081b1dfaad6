use thiserror::Error;

use crate::qformat::Precision;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unsupported precision: {0} bits (expected 1, 2, 4 or 8)")]
    InvalidPrecision(u32),
    #[error("precision set needs three distinct levels, got {0:?}")]
    InvalidPrecisionSet(Vec<u32>),
    #[error("invalid bitstring {0:?} for a {1}-bit code")]
    InvalidCode(String, u32),
    #[error("non-finite input value {0}")]
    NonFinite(f64),
    #[error("value {value} is not on the {precision}-bit grid")]
    OffGrid { value: f64, precision: Precision },
    #[error("empty layer")]
    EmptyLayer,
    #[error("empty precision set")]
    EmptySet,
    #[error("precision {0} is not part of the layer's precision set")]
    PrecisionNotInSet(Precision),
    #[error("lane holds {found} elements, a {precision}-bit lane holds {expected}")]
    LaneWidth { precision: Precision, expected: usize, found: usize },
    #[error("accumulator saturation in {0}")]
    Saturation(&'static str),
    #[error("pattern index {0} out of range (35 patterns)")]
    PatternIndex(usize),
    #[error("stream mismatch: {0}")]
    StreamMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("precision map or permutation mismatch: {0}")]
    MapMismatch(String),
    #[error("non-positive variance term {0}")]
    NonPositiveVariance(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
