//! Stochastic Liouville–von Neumann simulation of the driven spin-boson model.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod bath;
pub mod ensemble;
pub mod error;
pub mod grid;
pub mod noise;
pub mod observables;
pub mod propagator;

pub use error::{Error, Result};
