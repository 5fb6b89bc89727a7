//! Sparse multivariate functional linear discriminant analysis.
//!
//! Irregularly sampled multi-feature curves are smoothed onto a common grid,
//! standardized, and reduced to sparse discriminant functions `β(t)` whose
//! nonzero pattern selects discriminating features and time points.

pub mod classify;
pub mod cli;
pub mod error;
pub mod fd_model;
pub mod io;
pub mod lda_core;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod scatter;
pub mod simgen;
pub mod sparse;
pub mod tensor;
pub mod tuning;

pub use error::{MfldaError, Result};
