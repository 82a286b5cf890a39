//! Low-light image enhancement with an axis-based attention transformer.
//!
//! Everything is built on a small reverse-mode autodiff engine ([`tensor`])
//! so the same op implementations serve inference, training and the
//! gradient-check suite. No threads anywhere: results are bit-reproducible
//! from a seed, on any target (including wasm).

pub mod attention;
pub mod blocks;
pub mod degrade;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod model;
pub mod nnops;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{backward, grad_check, Gradients, Tape, Tensor};
