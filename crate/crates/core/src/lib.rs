//! Estimation of a finite-population mean from a non-probability sample
//! combined with a design-weighted probability sample: pseudo-likelihood
//! propensity scores, penalized variable selection, and IPW/AIPW estimators
//! with plug-in variances, plus a Monte-Carlo study harness.

pub mod data;
pub mod error;
pub mod estimators;
pub mod outcome;
pub mod propensity;
pub mod sim;
pub mod solvers;

pub use data::{CombinedSample, Membership, PositivityConfig, SchemaDescriptor, UnitRecord};
pub use error::{Error, Result};
pub use estimators::{aipw_report, ipw_report, DesignVariance, EstimateReport, PoissonDesign};
pub use outcome::{fit_outcome, fit_outcome_flexible, predict, OutcomeFamily, OutcomeFit};
pub use propensity::{
    cv_lambda, fit_collaborative, fit_lasso, fit_newton, fit_oalasso, fit_scad_union,
    PenaltyConfig, PropensityFit, PropensityMethod,
};
pub use sim::{run_monte_carlo, EstimatorKind, MetricsRow, ScenarioSpec};
