//! Two-time (Kadanoff-Baym) solvers for nonequilibrium quantum dynamics of the
//! Bose-Hubbard lattice and the quantum-mechanical O(N) model, exact oracles
//! for both, Gaussian correlation entropy, and spectral tools for product
//! manifolds.

pub mod bh;
pub mod dense;
pub mod error;
pub mod observables;
pub mod qmon;
pub mod spectral;
pub mod timegrid;

pub use error::{Error, Result};
pub use timegrid::{allocate_kernel, volterra_step, TimeGrid, TwoTimeKernel};
