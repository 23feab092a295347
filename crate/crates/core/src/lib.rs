//! Adjoint-based boundary control of the two-dimensional stochastic
//! Navier-Stokes equations with Navier-slip boundary conditions.
//!
//! The state lives in a Galerkin space spanned by discrete slip-Stokes
//! eigenmodes on a staggered grid over the unit square. Boundary data
//! `(a, b)` enter through a stationary Stokes lifting.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adjoint;
pub mod cli;
pub mod control;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod noise;
pub mod operators;
pub mod stats;

pub use error::{Error, Result};
