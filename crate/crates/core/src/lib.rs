//! Linear-attention neural operator toolkit.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`kernels`], [`autodiff`], [`gradcheck`]: dense tensors,
//!   reverse-mode differentiation and its finite-difference oracle.
//! * [`attention`]: softmax, linear and agent attention with positional
//!   biases, depthwise convolution and closed-form FLOP counts.
//! * [`model`]: encoder / pre-norm agent-attention processor / decoder, and
//!   checkpoints.
//! * [`train`]: losses, AdamW, learning-rate schedules and the epoch driver.
//! * [`data`]: finite-volume Darcy solver, synthetic benchmark generation and
//!   the on-disk dataset format.
//! * [`bench`]: scaling sweeps, ablations and zero-shot resolution transfer.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use parallel::Parallelism;
pub use tensor::{DType, Real, Tensor};
