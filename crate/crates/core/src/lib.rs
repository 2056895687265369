//! Structured variational inference for linear and switching linear dynamical
//! systems, with a desk-scale SVAE trainer on top.
//!
//! The crate is organized around three layers:
//!
//! - exponential-family machinery: [`expfam`], [`param_space`];
//! - belief propagation: sequential [`chain`] and [`hmm`], temporally parallel
//!   [`parallel`], and the structured mean-field coupling in [`meanfield`] with
//!   objective bookkeeping in [`objective`];
//! - learning: a tape autodiff layer in [`diff`], gradient estimators
//!   (unrolled, implicit/Richardson, natural) in [`gradients`], and the full
//!   encoder/decoder model in [`model`] with synthetic data in [`data`].

pub mod chain;
pub mod data;
pub mod diff;
pub mod error;
pub mod expfam;
pub mod gradients;
pub mod hmm;
pub mod linalg;
pub mod meanfield;
pub mod model;
pub mod objective;
pub mod parallel;
pub mod param_space;
pub mod rng;

pub use error::{Result, SvaeError};
