//! Extreme quantile treatment effects via tail-calibrated inverse estimating equations.
//!
//! The crate combines an IPW-weighted empirical body with a generalized Pareto
//! tail, solves the discretized estimating equation exactly, and provides
//! sandwich inference, baseline estimators and a Monte Carlo harness.

pub mod baselines;
pub mod dataset;
pub mod error;
pub mod evt;
pub mod inference;
pub mod optim;
pub mod propensity;
pub mod report;
pub mod simulation;
pub mod tiee;

pub use dataset::{load_csv, read_csv, weighted_quantile, ColumnMap, Dataset, Observation, WeightedSample};
pub use error::{Error, Result};
pub use propensity::{build_design, fit_glm, ipw_weights, DesignSpec, Link, PropensityFit};
pub use tiee::{estimate_eqte, EqteResult, TieeConfig, TieeEstimate, TieeFit};
