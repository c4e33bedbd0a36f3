//! Tail models: GPD fitting and extreme value index estimators.

pub mod gpd;
pub mod index;

pub use gpd::{
    default_threshold_level, fit_gpd, fit_gpd_covariate, gpd_cdf, gpd_quantile, CovariateGpdFit, GpdFit, GpdTail,
};
pub use index::{
    hill_causal, hill_extrapolate, hill_weighted, pickands_evi, pickands_extrapolate, EviEstimate, EviMethod,
    PickandsConfig,
};
