//! # klpolicy
//!
//! Synthesis of randomized control policies from example datasets by
//! constrained Kullback-Leibler divergence minimization.
//!
//! The library works with probability densities discretized on rectangular
//! grids. Given a probabilistic model of the system under control, a
//! reference behavior extracted from example data, and expectation-form
//! actuation constraints, it computes the family of per-stage conditional
//! policies `f(u_k | x_{k-1})` that makes the closed-loop joint density as
//! close as possible (in KL divergence) to the reference joint while
//! satisfying the constraints.
//!
//! Pipeline:
//!
//! 1. [`data`] — ingest trajectory CSVs, build empirical joint densities,
//!    fit linear-Gaussian transition models by least squares, extract the
//!    example policy by conditioning.
//! 2. [`constraint`] — expectation-form constraint functionals
//!    `E_f[h] - H` (moments, rectangular bounds, probabilistic bounds) and a
//!    constructive Slater feasibility check.
//! 3. [`projection`] — the constrained I-projection: minimize
//!    `KL(f||g) + E_f[alpha]` subject to the constraints, solved through the
//!    Lagrangian dual in closed form up to the multipliers.
//! 4. [`synthesis`] — the backward dynamic-programming recursion composing
//!    one projection per (stage, conditioning state) into the optimal policy
//!    family, plus the per-stage optimal values.
//! 5. [`simulation`] — closed-loop rollouts of a synthesized policy with
//!    reproducible per-rollout RNG streams.
//! 6. [`artifact`] — checksummed JSON serialization of every pipeline
//!    artifact.

pub mod artifact;
pub mod conditional;
pub mod constraint;
pub mod data;
pub mod density;
pub mod grid;
pub mod joint;
pub mod projection;
pub mod simulation;
pub mod synthesis;

pub use conditional::{ConditionalDensity, RowFlag};
pub use constraint::{Constraint, ConstraintKind, ConstraintSet, SlaterOptions, SlaterWitness};
pub use density::{Density, DensityError};
pub use grid::Grid;
pub use joint::JointDensity;
pub use projection::{
    DualSolution, ProjectionResult, ProjectionError, SolverOptions, TiltSpec,
};
pub use synthesis::{Policy, StageCache, StageConstraints, SynthesisProblem, SynthesisReport};
