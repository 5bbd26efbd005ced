use thiserror::Error;

use crate::trainer::LayerParams;

pub type Result<T> = std::result::Result<T, QuantError>;

#[derive(Debug, Error)]
pub enum QuantError {
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("scale must be positive, got {scale} for group {group}")]
    NonPositiveScale { group: usize, scale: f64 },

    #[error("code {code} at index {index} exceeds {bits}-bit range")]
    CodeOutOfRange { index: usize, code: u32, bits: u8 },

    #[error("invalid bit width {bits}: {reason}")]
    InvalidBits { bits: u32, reason: &'static str },

    #[error("{what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("{what} = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("{stage} diverged at step {step} (loss = {loss})")]
    Diverged {
        stage: &'static str,
        step: usize,
        loss: f64,
        last_good: Box<LayerParams>,
    },

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<QuantError>,
    },
}
