//! Estimation of causal effects on non-negative two-part outcomes.
//!
//! A two-part (semicontinuous) outcome has a point mass at zero and a
//! continuous positive part: `Y = Δ·S` with `Δ = 1(Y > 0)`. This crate
//! estimates the expected outcome under a hypothetical intervention on the
//! treatment — static assignments, dynamic rules, additive shifts with a
//! support cap, and incremental propensity-score interventions — using a
//! two-step targeted estimator (`htmle`) that tilts separate models for the
//! positive-outcome probability and the positive-part mean, plus standard
//! TMLE and AIPW comparators built on a single outcome regression.
//!
//! The pipeline is:
//!
//! 1. [`data`] — dataset construction, the zero/positive decomposition, and
//!    outcome scaling to `(0, 1)`.
//! 2. [`policy`] — interventions `d(t, x, ε)` and analytic density ratios.
//! 3. [`learners`] — weighted GLMs with offsets (IRLS) and a cross-validated
//!    discrete model selector.
//! 4. [`nuisance`] — cross-fitted estimation of the density ratio `r`, the
//!    positive-outcome probability `q`, and the positive-part mean `m`.
//! 5. [`estimators`] — the two-step tilting algorithm, comparators, and
//!    influence-function / bootstrap variance.
//! 6. [`sim`] — a synthetic data-generating mechanism and a Monte Carlo
//!    study harness for bias / variance / coverage experiments.

pub mod data;
pub mod estimators;
pub mod learners;
pub mod nuisance;
pub mod policy;
pub mod sim;

mod seed;

pub use data::{OutcomeScaler, TwoPartDataset};
pub use estimators::{aipw, htmle, tmle_standard, EstimateReport, EstimatorConfig, VarianceMethod};
pub use nuisance::{CrossFitPlan, NuisanceTable};
pub use policy::Policy;
pub use sim::{DgmConfig, StudyResult};

use thiserror::Error;

/// Top-level error type; each variant names the module that failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error("data: {0}")]
    Data(#[from] data::DataError),
    #[error("policy: {0}")]
    Policy(#[from] policy::PolicyError),
    #[error("learners: {0}")]
    Learner(#[from] learners::LearnerError),
    #[error("nuisance: {0}")]
    Nuisance(#[from] nuisance::NuisanceError),
    #[error("estimators: {0}")]
    Estimator(#[from] estimators::EstimatorError),
    #[error("sim: {0}")]
    Sim(#[from] sim::SimError),
}

/// Convenience alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;
