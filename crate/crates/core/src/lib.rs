//! Klein-Gordon field coupled to a relativistic point particle with a scalar
//! charge: discrete concatenated action, variational integrator, stress-energy
//! audits and the command-line front end.

// Index loops mirror tensor notation; NaN must fail the negated comparisons.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod cli_io;
pub mod coupled;
pub mod error;
pub mod geometry;
pub mod kg_field;
pub mod lagrangian;
pub mod particle;
pub mod simulate;
pub mod sem;
pub mod util;

pub use error::{Error, Result};
