//! Numerical core of U-Flow: Bayesian inverse medium scattering with a U-Net
//! whose coarsest latent is modelled by a conditional Glow.
//!
//! The crate is `no_std` (with `alloc`). File formats, datasets on disk and
//! the command line live in the companion `uflow` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adjoint;
pub mod banded;
pub mod error;
pub mod flow;
pub mod kernels;
pub mod krylov;
pub mod linalg;
pub mod optim;
pub mod posterior;
pub mod records;
pub mod scene;
pub mod tape;
pub mod tensor;
pub mod unet;
pub mod wave;

pub use error::TensorError;
pub use optim::{Adam, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
