//! Numerical engine for optimal investment under a hidden regime-switching
//! drift when the investor may buy noisy signals about the current regime.
//!
//! The market has one risky asset whose drift is modulated by an unobserved
//! finite-state Markov chain. The investor observes prices, filters the
//! regime probabilities (Wonham filter), and may at any time pay a fee to
//! receive a signal `Z = q·μᵀY + (1-q)·ε` of chosen quality `q ∈ [0,1)`.
//! The dynamic programming equation for the value function is a
//! Hamilton-Jacobi-Bellman quasi-variational inequality whose obstacle is a
//! non-local intervention operator (best expected post-purchase value).
//!
//! Pipeline:
//! - [`model`]: parameters, power utility, signal cost family and its
//!   inverse, Gaussian noise with Gauss-Hermite quadrature;
//! - [`filter`]: belief drift/diffusion, the Bayes update after a signal,
//!   and the full state jump map;
//! - [`solver`]: backward finite-difference solution of the HJBQVI on a
//!   (t, w, p) grid for two regimes, with invariant verification;
//! - [`policy`]: continuation/purchase region extraction and feedback maps;
//! - [`simulate`]: forward path generation (hidden chain, innovations,
//!   controlled wealth/belief with purchase impulses) plus a bootstrap
//!   particle filter used as an independent filter oracle;
//! - [`montecarlo`]: strategy evaluation, martingale diagnostic, and
//!   PDE-vs-Monte-Carlo consistency verdicts;
//! - [`config`] / [`container`]: TOML run configuration and the binary
//!   grid/policy artifact format.

pub mod config;
pub mod container;
pub mod filter;
pub mod model;
pub mod montecarlo;
pub mod policy;
pub mod simulate;
pub mod solver;

pub use config::{ConfigError, FileConfig};
pub use filter::{Belief, State};
pub use model::{CostModel, ModelError, ModelParams, NoiseModel, Utility};
pub use policy::{Policy, PolicyAction, Region};
pub use solver::{GridSpec, SolveSettings, SolverError, ValueGrid};
