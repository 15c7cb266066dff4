//! Differentiable 3D tensor engine and the dual-branch cross-attention fusion
//! network built on it.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the command line
//! and dataset IO live in the `dc2fusion` crate.

#![no_std]

extern crate alloc;

pub mod attention;
pub mod autodiff;
mod error;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod phantom;
mod real;
pub mod suite;
mod tensor;
pub mod training;
pub mod volume;

pub use autodiff::{BackwardCtx, Tape, Var};
pub use error::{Error, Result};
pub use model::{FusionNet, ModelConfig, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
