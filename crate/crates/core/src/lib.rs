//! Deterministic desk-scale simulator for silent data corruption (SDC) in
//! tensor-parallel transformer training.
//!
//! A healthy and an unhealthy logical node run the same decoder-only model
//! from the same seed. The unhealthy node carries an [`inject::SdcProfile`];
//! the [`lockstep`] harness compares the two at submodule boundaries,
//! gradients, and parameters. [`abft`] provides checksummed matmul.

pub mod abft;
pub mod cli;
pub mod collectives;
pub mod error;
pub mod inject;
pub mod lockstep;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
