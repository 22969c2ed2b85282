// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

#[cfg(feature = "cli")]
pub mod cli;
pub mod error;
pub mod evalx;
pub mod io;
pub mod moe;
pub mod nn;
mod par;
pub mod pde;
pub mod rng;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod upcycle;

pub use error::{Error, Result};
pub use tensor::Tensor;
