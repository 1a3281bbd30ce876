//! Viscous Hamilton–Jacobi–Bellman solvers built from operator splitting.
//!
//! The equation `u_t + H(x, Du) = eps Δu` is advanced by alternating an exact
//! heat step with a first-order HJ step. The first-order step is solved by
//! value-gradient policy iteration along characteristic curves, with a
//! parametric value approximator fitted to the trajectory labels.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod characteristics;
pub mod error;
pub mod harness;
pub mod heat;
pub mod learning;
pub mod numerics;
pub mod pi_lambda;
pub mod problem;
pub mod splitting;

pub use error::{Error, Result};
