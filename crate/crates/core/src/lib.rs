//! Group relative attention guidance (GRAG) for multimodal joint attention.
//!
//! The crate is generic over the element type through [`Scalar`]
//! (implemented for `f32` and `f64`); the aliases below pin the common cases.

pub mod analysis;
pub mod attention;
pub mod error;
pub mod grag;
pub mod harness;
pub mod numerics;
pub mod scalar;

pub use error::{GragError, NpyError, Result};
pub use numerics::Tensor;
pub use scalar::{DType, Scalar};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
