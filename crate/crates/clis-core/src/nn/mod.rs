//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! The training graph is rebuilt on a fresh [`Tape`] every step: forward ops
//! push nodes carrying their value and a backward closure, and
//! [`Tape::backward`] walks the tape in reverse accumulating gradients.
//! Everything runs in `f64`; loss contracts in this crate are tight enough
//! (1e-9 compositions, finite-difference gradient checks) that single
//! precision would not hold them.

mod ops;
mod params;
mod sgd;
mod tape;

pub use ops::sigmoid;
pub use params::{fnv1a64, he_normal, normal_init, zeros, ParamBinder, ParamStore};
pub use sgd::SgdMomentum;
pub use tape::{Gradients, Tape, Var};
