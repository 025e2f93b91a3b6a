//! Multi-objective off-policy evaluation and policy learning with
//! reduced-rank outcome denoising.
//!
//! Outcomes are vector valued; a weighting `ρ` scalarizes them. Per-arm
//! reduced-rank regressions denoise the outcomes before they enter the
//! direct-method, inverse-propensity, doubly-robust and control-variate
//! policy-value estimators, and logistic policies are fitted by gradient
//! descent on any of those estimates.

pub mod data;
pub mod error;
pub mod linalg;
pub mod policy;
pub mod propensity;
pub mod rrr;
pub mod estimators;
pub mod policy_opt;
pub mod simulation;
pub mod pipeline;
pub mod io;

pub use data::{standardize, Arm, Dataset, ObjectiveSense, OutcomeSpace, Scalarization, StandardizationParams, ARMS};
pub use error::{Error, ErrorClass, Result};
pub use policy::{policy_prob, ConstantPolicy, PolicyParams, TreatmentPolicy};
pub use propensity::{propensity_fit, PropensityModel};
pub use rrr::{fit_ols, fit_rrr, select_rank, FullRankModel, GammaMode, RrrModel};
