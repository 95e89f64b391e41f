//! Numerical laboratory for backward stochastic Volterra integral equations
//! (BSVIEs) driven by Brownian motion and compensated Poisson jumps, with an
//! extra orthogonal noise source.
//!
//! The crate is organized along the pipeline:
//! - [`constants`]: well-posedness constants and admissibility conditions;
//! - [`lattice`]: deterministic clocks, exact scenario trees and Monte-Carlo
//!   path ensembles;
//! - [`conditional`]: conditional-expectation engines and discrete
//!   martingale representation;
//! - [`bsde`]: backward solvers for (parametrized) BSDEs;
//! - [`bsvie`]: Type-I and Type-II BSVIE solvers, M-solution completion;
//! - [`analysis`]: norms, a-priori/stability/comparison/duality/regularity
//!   harnesses;
//! - [`cli`]: batch experiment runner behind the `bsvielab` binary.

pub mod analysis;
pub mod bsde;
pub mod cli;
pub mod bsvie;
pub mod conditional;
pub mod constants;
pub mod error;
pub mod lattice;

pub use error::{Error, Result};
