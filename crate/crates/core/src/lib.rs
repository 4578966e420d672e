//! Simulation and validation toolkit for two-dimensional affine processes and
//! catalytic CBI-processes on `D = R+ x R`.
//!
//! - [`params`]: admissible parameter sets and jump measures.
//! - [`transform`]: characteristic exponents via the generalized Riccati system.
//! - [`noise`]: seeded, replayable Brownian and Poisson driving noise.
//! - [`sde`]: Euler schemes with thinning for the strong-solution equations.
//! - [`validate`]: Monte Carlo checks of simulations against the transform.

pub mod examples;
pub mod io;
pub mod noise;
pub mod ode;
pub mod params;
pub mod quad;
pub mod sde;
pub mod transform;
pub mod validate;

pub use params::{AdmissibleParams, JumpMeasure, RawParams, UPoint};
