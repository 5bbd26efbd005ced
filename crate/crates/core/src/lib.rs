//! Residual bit-slice quantization with token-routed elastic precision.
//!
//! Weights are split into a shared MSB slice plus residual slices, each a
//! recursive floor quantization of what the previous slices missed. A small
//! per-layer router decides per token which residual slices participate, so
//! one set of integer codes serves any average bit width.

pub mod bitplane;
pub mod error;
pub mod matrix;
pub mod qcore;
pub mod router;
pub mod slicer;
pub mod trainer;

pub use error::{QuantError, Result};
pub use matrix::Matrix;
