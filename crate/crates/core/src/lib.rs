//! Numerical laboratory for a directed polymer on a cylinder.
//!
//! The random environment is periodic space-time white noise; the polymer
//! partition function solves the multiplicative stochastic heat equation.
//! The crate provides the one-unit propagators of that equation, exact
//! sampling of the polymer's grid path and of its winding increments,
//! endpoint densities on the torus and on the line, the invariant
//! (Brownian bridge) law, and Monte Carlo estimators built on them.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix `f64`.

pub mod endpoint;
pub mod error;
pub mod estimators;
pub mod gibbs;
pub mod kernel;
pub mod noise;
pub mod rng;
pub mod scalar;
pub mod stationary;
pub mod stats;

pub use error::{Error, Result};
pub use noise::GridSpec;
pub use scalar::Real;

pub type Noise = noise::NoiseGrid<f64>;
pub type Kernel = kernel::WindingKernel<f64>;
pub type Torus = kernel::TorusKernel<f64>;
pub type Density = endpoint::TorusDensity<f64>;
pub type Line = endpoint::LineDensity<f64>;
pub type Boundary = gibbs::BoundaryCondition<f64>;
pub type Path = gibbs::PathSample<f64>;
pub type Plan = kernel::SolverPlan<f64>;
