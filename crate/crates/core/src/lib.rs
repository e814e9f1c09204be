//! Convolutions with learned dilation masks.
//!
//! A layer multiplies its kernel by a mask `M` before convolving. The mask
//! is either a fixed binary pattern, the outer product of two sigmoid
//! vectors (separable), or a sigmoid grid (general). A barrier penalty
//! keeps the mask mass within a budget of active taps.

pub mod autograd;
pub mod cli;
pub mod constraint;
pub mod conv;
pub mod dilation;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
