//! Distributionally robust stratified sampling.
//!
//! Simulation inputs are drawn from one reference pmf, stratified over a
//! discrete grid, and reweighted to estimate exceedance probabilities under
//! several uncertain input models. The budget split across strata is chosen to
//! minimize the worst-case estimator variance over ambiguity sets around each
//! model's nominal pmf.

// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ambiguity;
pub mod bo;
pub mod dist;
pub mod error;
pub mod estimators;
pub mod inner;
pub mod problem;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
