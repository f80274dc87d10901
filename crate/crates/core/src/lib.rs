//! Feature alignment and restoration for multi-domain classification.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`autodiff`]), the attention-gated network ([`network`]), the training
//! objectives ([`losses`]), a synthetic multi-domain benchmark ([`data`]),
//! the per-loss routed trainer ([`trainer`]) and evaluation tooling
//! ([`diagnostics`]).

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod losses;
pub mod network;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Grads, Tape, Var};
pub use error::{FarError, Result};
pub use tensor::{Real, Tensor};
