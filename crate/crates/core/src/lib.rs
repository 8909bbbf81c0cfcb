//! Instrumental-variable estimation of local average treatment effects for
//! residence-permit lotteries.
//!
//! The crate covers the whole path from raw administrative extracts to
//! report tables:
//!
//! - [`linkage`] reads lottery and employment CSV extracts, links them per
//!   person and builds the evaluation sample anchored at a chosen lottery
//!   participation.
//! - [`propensity`] fits the instrument propensity score `Pr(Z = 1 | X)` by
//!   probit maximum likelihood.
//! - [`estimator`] computes inverse-probability-weighted LATE, ITT and first
//!   stage effects, complier means under non-treatment, and the pooled,
//!   per-period and subgroup variants.
//! - [`bootstrap`] provides cluster (person-level) bootstrap inference.
//! - [`dgp`] simulates lottery data with known ground truth.
//! - [`report`] orchestrates a run and writes JSON, text and CSV reports.

pub mod bootstrap;
pub mod dgp;
pub mod estimator;
pub mod linkage;
pub mod normal;
pub mod propensity;
pub mod report;

pub use bootstrap::{cluster_bootstrap, BootstrapConfig, BootstrapResult};
pub use dgp::{DgpConfig, GroundTruth};
pub use estimator::{
    estimate_by_period, estimate_pooled, estimate_subgroup, ipw_late, run_pipeline, LateEstimate,
    OutcomeKind, PipelineConfig, Subgroup, TrimRule, Weighting,
};
pub use linkage::{build_evaluation_sample, link_records, select_participation, EvaluationSample};
pub use propensity::{build_design, fit_probit, predict_pscore, CovariateMode, CovariateSpec};
