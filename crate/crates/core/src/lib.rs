//! Adiabatic braiding of pinned quasiparticles in lattice quantum Hall
//! systems of non-interacting fermions.
//!
//! The crate builds Hofstadter Hamiltonians with Gaussian pinning
//! potentials, tracks many-body Slater ground states along pin trajectories
//! and extracts gauge-invariant Berry phases, quasiparticle charges and
//! exchange statistics.

// `!(x > tol)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod experiment;
pub mod geomphase;
pub mod interferometry;
pub mod lattice;
pub mod manybody;
pub mod parallel;

pub use error::{Error, Result};
