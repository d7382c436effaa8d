//! Numerical toolkit for a two-stage attention → choice model of benefit
//! take-up: probability primitives, random-effects panel maximum likelihood,
//! a synthetic household simulator, counterfactual policy experiments,
//! identification diagnostics, and pilot-program evaluation statistics.

pub mod counterfactual;
pub mod error;
pub mod identification;
pub mod imputation;
pub mod io;
pub mod likelihood;
pub mod model;
pub mod optimize;
pub mod policy_eval;
pub mod quadrature;
pub mod simulator;
pub mod stats;

pub use error::{Error, Result};
