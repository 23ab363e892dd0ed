//! Block-wise model merging driven by multi-objective Bayesian optimization.
//!
//! The pipeline cuts a model's layers into blocks, searches one merge weight
//! per block with Gaussian-process surrogates and a Monte-Carlo expected
//! hypervolume improvement acquisition, and returns a Pareto set of merged
//! models together with preference-based selections from it.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod clock;
pub mod driver;
pub mod error;
pub mod merge;
pub mod mobo;
pub mod objectives;
pub mod optim;
pub mod partition;
pub mod surrogate;
pub mod tensor_store;

pub use error::{Error, Result};
