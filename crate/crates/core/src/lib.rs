//! Two-view relative pose from orientation- and scale-covariant feature
//! correspondences.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod benchmark;
pub mod constraints;
pub mod error;
pub mod geometry;
pub mod io;
pub mod robust;
pub mod solvers;
pub mod synthetic;

#[cfg(test)]
pub(crate) mod testing;

pub use error::{Error, Result};
