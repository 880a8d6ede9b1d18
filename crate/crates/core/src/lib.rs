//! Core of a rotation-invariant vision transformer for object re-identification.
//!
//! The crate is `no_std` (with `alloc`) and holds everything that is pure
//! computation: a dense tensor with reverse-mode differentiation, the ViT
//! backbone, feature-level rotation branches, the training objective,
//! retrieval metrics, synthetic data generation, identity-balanced sampling,
//! and the optimizer and training loop. File formats, configuration files and
//! the command line live in the companion `rottrans` crate.

#![no_std]

extern crate alloc;

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod optim;
pub mod param;
pub mod rng;
pub mod rotation;
pub mod train;
pub mod vit;
mod scalar;
mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use param::{Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
