//! Numerical tools for gradient interface models with non-convex
//! nearest-neighbour potentials: single-site decimation, checks of the
//! random walk representation, lattice samplers and observables.

pub mod error;
pub mod par;
pub mod potentials;
pub mod quadrature;
pub mod rng;
pub mod decimation;
pub mod lattice;
pub mod stats;
pub mod green;
pub mod sampler;
pub mod observables;

pub use error::{Error, Result};
