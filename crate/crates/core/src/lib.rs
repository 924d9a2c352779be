//! Inverse input-output models of linear parameter-varying systems, with
//! neural networks as coefficient functions.
//!
//! The crate covers the full estimation path: delta-domain filtering and its
//! exact inverse ([`delta`]), parameterized coefficient maps ([`coeffs`]),
//! output prediction with analytic residual Jacobians ([`predictor`]),
//! damped Gauss-Newton, gradient-descent and iteratively reweighted
//! estimators ([`optim`]), finite-difference self checks ([`diagnostics`]),
//! a simulated two-mass rig for end-to-end validation ([`benchmark`]), and
//! model persistence ([`model_file`]).

pub mod benchmark;
pub mod coeffs;
pub mod delta;
pub mod diagnostics;
pub mod error;
pub mod model_file;
pub mod optim;
pub mod predictor;
pub mod study;

pub use error::{Error, Result};
