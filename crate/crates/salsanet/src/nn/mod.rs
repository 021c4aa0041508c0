//! Minimal dense tensor engine and the SalsaNet encoder-decoder network.
//!
//! Everything is CPU-side `f32` in N,C,H,W layout. Each layer provides a
//! forward pass and an analytic backward pass; the test suite checks every
//! backward pass against central finite differences of an independent f64
//! reference implementation.

pub mod checkpoint;
mod matmul;
pub mod network;
pub mod ops;
pub mod tensor;

pub use network::{Network, NetworkConfig};
pub use ops::Mode;
pub use tensor::Tensor;

/// Errors from tensor and layer operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NnError {
    /// Operand shapes are incompatible; carries a description of both shapes.
    Shape(String),
    /// An operation parameter is out of its valid range.
    Parameter(String),
    /// Batch-norm in training mode needs at least two values per channel.
    DegenerateBatch { per_channel: usize },
}

impl std::fmt::Display for NnError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NnError::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            NnError::Parameter(msg) => write!(f, "invalid parameter: {msg}"),
            NnError::DegenerateBatch { per_channel } => write!(
                f,
                "batch norm requires >= 2 values per channel in training mode, got {per_channel}"
            ),
        }
    }
}

impl std::error::Error for NnError {}
