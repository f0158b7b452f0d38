//! Numerical laboratory for the Ghatak-Sherrington spin glass.
//!
//! * [`quadrature`]: Gauss-Hermite expectations against the standard Gaussian.
//! * [`fixedpoint`]: the `(p, q)` order-parameter map and its contraction solver.
//! * [`gibbs`]: the finite-N Hamiltonian, exact enumeration and heat-bath MCMC.
//! * [`experiments`]: disorder-averaged TAP residuals and overlap concentration.
//! * [`cli`]: configuration parsing and the batch runner behind the `gstap` binary.

pub mod cli;
pub mod experiments;
pub mod fixedpoint;
pub mod gibbs;
pub mod kernel;
pub mod quadrature;
pub mod seeding;

pub use fixedpoint::{ModelParams, OrderParams, SolveOptions, SolveReport};
pub use gibbs::{DisorderSample, GibbsStats, SpinConfig};
pub use quadrature::GaussianRule;
