//! Desk-scale laboratory for continuous chain-of-thought reasoning with
//! Jacobi-iterated latent thought tokens.
//!
//! The crate is generic over the scalar type: 64-bit for verification and
//! gradient checking, 32-bit for training and benchmarks. Concrete aliases
//! for both precisions live at the crate root.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod reasoning;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tape::{grad_check, NodeId, Tape};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
