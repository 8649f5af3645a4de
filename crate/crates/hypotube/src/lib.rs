//! Numerical toolkit for tube estimates of hypoelliptic diffusions.
//!
//! A diffusion `dX = Σ_j σ_j(t,X) ∘ dW^j + b(t,X) dt` whose fields satisfy a
//! strong Hörmander condition of order one propagates at speed `√δ` along the
//! `σ_j` directions and at speed `δ` along the first-order brackets
//! `[σ_i, σ_j]`. This crate makes that picture computable:
//!
//! * [`fields`] / [`exprdsl`]: vector fields with exact (symbolic) or
//!   finite-difference derivatives, enough for brackets, Itô corrections and
//!   local derivative bounds;
//! * [`geometry`]: the bracket-augmented directional matrix `A(t,x)`, its
//!   diagonal scaling `A_R`, and the anisotropic norm `|y|_{A_R}`;
//! * [`skeleton`]: controls, the deterministic skeleton ODE and the
//!   `L(μ,h)` regularity class;
//! * [`montecarlo`]: reproducible parallel simulation of the SDE and the
//!   probability of staying in the unit tube around a skeleton;
//! * [`bounds`]: the explicit exponential lower/upper bound formulas, the
//!   concatenation time grid and its consistency checks;
//! * [`metrics`]: the quasi-distance `d`, the Carathéodory control distance
//!   `d_c` and the constant-control distance `d_*`, plus equivalence
//!   diagnostics;
//! * [`models`]: built-in catalog (Brownian motion, Grushin, Heisenberg,
//!   constant fields, user DSL) with closed-form reference data;
//! * [`validate`]: the self-contained validation suite driven by the CLI
//!   and by the acceptance tests.

pub mod bounds;
pub mod error;
pub mod exprdsl;
pub mod fields;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod montecarlo;
pub mod report;
pub mod skeleton;
pub mod validate;

pub use error::{Result, TubeError};
