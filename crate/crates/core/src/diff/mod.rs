//! Differentiable layer: the autodiff tape plus taped mirrors of the model
//! computations (exponential-family maps, chain and HMM belief propagation,
//! mean-field messages, and the loss assembly).
//!
//! The plain modules in the crate root are the fast forward implementations;
//! everything here exists to be differentiated. Forward agreement between the
//! two is tested, so the taped versions inherit the oracle checks.

pub mod chain;
pub mod expfam;
pub mod hmm;
pub mod loss;
pub mod meanfield;
pub mod tape;

pub use tape::{grad_of, grad_or_zero, CustomMap, Tape, VarId};
