//! Multi-outcome treatment effect estimation and policy learning for a
//! continuous treatment with a surrogate and a primary outcome.

// Range checks are written as `!(a < b)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod diff;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod mi;
pub mod model;
pub mod pareto;
pub mod poe;
pub mod popl;

pub use error::{Error, Result};
