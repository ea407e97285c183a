// Negated float comparisons are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod anchor;
pub mod checks;
pub mod dataset;
pub mod env;
pub mod exec;
pub mod harness;
pub mod error;
pub mod infer;
pub mod planner;
pub mod rng;
pub mod value;

pub use error::{Error, Result};
