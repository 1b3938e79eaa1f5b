//! Simulation of random time change equations for piecewise deterministic
//! Markov processes.
//!
//! A model is `X(t) = X(0) + ∫₀ᵗ f(X(s)) ds + Σ_k Y_k(∫₀ᵗ λ_k(X(s)) ds) ν_k`
//! with independent unit-rate Poisson processes `Y_k`. The [`stepper`]
//! module advances the Θ-Maruyama method, [`exact`] builds the exact path
//! for models with analytic flow and hazard hooks, and [`analysis`] couples
//! both through shared [`poisson::PathBundle`]s to estimate strong errors.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod exact;
pub mod model;
pub mod par;
pub mod poisson;
pub mod quadrature;
pub mod stepper;

pub use error::{Result, RteError};
pub use model::{apply_scaling, builtin, AnalyticHooks, Rate, RteModel, ScalingSpec};
pub use par::Execution;
pub use poisson::{PathBundle, PoissonPath, StreamId};
pub use stepper::{NegativityPolicy, Quadrature, SolverConfig};
