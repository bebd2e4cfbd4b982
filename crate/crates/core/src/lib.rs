//! Differentially private sparse binary classification.
//!
//! ADMM splits penalized logistic regression into a data-free proximal step
//! on a sparse copy `Z`, a smooth step on `w` that reads the data, and a dual
//! update. Only the smooth step is perturbed, by a random linear term `c b'w`
//! with `b` drawn from a density proportional to `exp(-gamma ||b||_2)`, and
//! the per-iteration privacy costs compose linearly over the iterations.
//!
//! Modules:
//! - [`model`]: datasets, losses, penalties and proximal operators
//! - [`noise`]: perturbation sampling and seed derivation
//! - [`solver`]: the perturbed ADMM loop (L1 and L1/2 instantiations)
//! - [`accountant`]: epsilon/gamma arithmetic and precondition checks
//! - [`data`]: synthetic design, CSV preprocessing, splits, dataset cache
//! - [`evaluation`]: metrics and the repeated-run experiment harness

pub mod accountant;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod noise;
pub mod solver;

pub use accountant::{epsilon_of, gamma_for, validate_theorem4, PrivacyParams, PrivacyPlan};
pub use error::{Error, Result};
pub use model::{AdmmState, Dataset, LossSpec, Penalty};
pub use solver::{run_dplh, run_dpll, run_dpsc, NoiseMode, SolveResult, SolverConfig};
