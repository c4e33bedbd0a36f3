//! Reference estimators: IPW weighted quantiles with b-out-of-n bootstrap,
//! causal Hill extrapolation and Pickands-based extrapolation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{weighted_quantile, Dataset, WeightedSample};
use crate::error::{Error, Result};
use crate::evt::index::{hill_causal, hill_extrapolate, pickands_evi, pickands_extrapolate, PickandsConfig};
use crate::inference::normal_quantile;
use crate::propensity::{fit_glm, ipw_weights, PropensityFit};
use crate::simulation::rng::{derive_seed, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    ZhangFirpo,
    CausalHill,
    Pickands,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: BaselineMethod,
    pub theta1: f64,
    pub theta0: f64,
    pub delta: f64,
    pub ci: Option<(f64, f64)>,
    /// Extreme value index per arm `(gamma_1, gamma_0)` where applicable.
    pub gamma: Option<(f64, f64)>,
    /// True when the target level lies beyond the weighted ECDF of either arm.
    pub at_boundary: bool,
}

/// `b`-out-of-`n` bootstrap settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl BootstrapConfig {
    pub fn new(seed: u64) -> Self {
        Self { resamples: 500, alpha: 0.10, seed }
    }

    /// `b = ceil(n^0.8)`.
    pub fn subsample_size(n: usize) -> usize {
        (n as f64).powf(0.8).ceil() as usize
    }
}

/// Weighted `tau`-quantile of an arm and whether `tau` exceeds the mass
/// below the arm maximum.
fn arm_quantile(sample: &WeightedSample, tau: f64) -> Result<(f64, bool)> {
    let w = sample.weights();
    let below_max = (sample.total_weight() - w[w.len() - 1]) / sample.total_weight();
    let boundary = tau > below_max;
    if boundary {
        return Ok((sample.max(), true));
    }
    Ok((weighted_quantile(sample, tau)?, false))
}

fn zf_point(ds: &Dataset, fit: &PropensityFit, tau: f64) -> Result<(f64, f64, bool)> {
    let (t1, b1) = arm_quantile(&ipw_weights(fit, ds, 1)?, tau)?;
    let (t0, b0) = arm_quantile(&ipw_weights(fit, ds, 0)?, tau)?;
    Ok((t1, t0, b1 || b0))
}

/// IPW weighted-quantile estimator of both arms, with an optional
/// b-out-of-n bootstrap interval (propensity refit on every resample).
pub fn zhang_firpo(ds: &Dataset, fit: &PropensityFit, tau: f64, boot: Option<&BootstrapConfig>) -> Result<BaselineResult> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Domain(format!("tau {tau} outside (0, 1)")));
    }
    ds.require_both_arms()?;
    let (theta1, theta0, at_boundary) = zf_point(ds, fit, tau)?;
    let delta = theta1 - theta0;
    let ci = match boot {
        Some(cfg) => bootstrap_interval(ds, fit, tau, delta, cfg)?,
        None => None,
    };
    Ok(BaselineResult {
        method: BaselineMethod::ZhangFirpo,
        theta1,
        theta0,
        delta,
        ci,
        gamma: None,
        at_boundary,
    })
}

fn bootstrap_interval(
    ds: &Dataset,
    fit: &PropensityFit,
    tau: f64,
    delta: f64,
    cfg: &BootstrapConfig,
) -> Result<Option<(f64, f64)>> {
    let n = ds.n();
    let b = BootstrapConfig::subsample_size(n);
    let draws: Vec<Option<f64>> = (0..cfg.resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(derive_seed(cfg.seed, r as u64), 0);
            let obs = (0..b).map(|_| ds.get(rng.random_range(0..n)).clone()).collect();
            let sub = Dataset::new(obs).ok()?;
            sub.require_both_arms().ok()?;
            let sub_fit = if fit.n_params() == 0 {
                PropensityFit::constant(&sub, fit.probabilities[0]).ok()?
            } else {
                fit_glm(&sub, &fit.spec).ok()?
            };
            let (t1, t0, _) = zf_point(&sub, &sub_fit, tau).ok()?;
            Some((b as f64).sqrt() * (t1 - t0 - delta))
        })
        .collect();
    let mut dev: Vec<f64> = draws.into_iter().flatten().collect();
    if dev.len() < 2 {
        return Ok(None);
    }
    dev.sort_by(f64::total_cmp);
    let sample = WeightedSample::unweighted(dev)?;
    let lo_q = weighted_quantile(&sample, cfg.alpha / 2.0)?;
    let hi_q = weighted_quantile(&sample, 1.0 - cfg.alpha / 2.0)?;
    let scale = (n as f64).sqrt();
    Ok(Some((delta - hi_q / scale, delta - lo_q / scale)))
}

/// Default intermediate tail fraction `n^{-0.35}`.
pub fn default_tail_fraction(n: usize) -> f64 {
    (n as f64).powf(-0.35)
}

/// Causal Hill EVI per arm, Weissman extrapolation to `tau`, and a
/// delta-method normal interval.
pub fn causal_hill(
    ds: &Dataset,
    fit: &PropensityFit,
    tau: f64,
    tail_fraction: f64,
    alpha: f64,
) -> Result<BaselineResult> {
    ds.require_both_arms()?;
    let p = 1.0 - tau;
    let n = ds.n() as f64;
    let mut theta = [0.0; 2];
    let mut gamma = [0.0; 2];
    let mut var_log = [0.0; 2];
    for d in [1u8, 0] {
        let est = hill_causal(ds, fit, d, tail_fraction)?;
        if !(est.gamma > 0.0) {
            return Err(Error::HeavyTailViolation(est.gamma));
        }
        let q = hill_extrapolate(est.intermediate, tail_fraction, p, est.gamma)?;
        let i = usize::from(1 - d);
        theta[i] = q;
        gamma[i] = est.gamma;
        var_log[i] = est.gamma.powi(2) * (1.0 + (tail_fraction / p).ln().powi(2)) / (n * tail_fraction);
    }
    let delta = theta[0] - theta[1];
    let sd = (theta[0].powi(2) * var_log[0] + theta[1].powi(2) * var_log[1]).sqrt();
    let z = normal_quantile(1.0 - alpha / 2.0);
    Ok(BaselineResult {
        method: BaselineMethod::CausalHill,
        theta1: theta[0],
        theta0: theta[1],
        delta,
        ci: Some((delta - z * sd, delta + z * sd)),
        gamma: Some((gamma[0], gamma[1])),
        at_boundary: false,
    })
}

/// Pickands EVI on each arm's IPW-weighted quantile function and
/// GPD-form extrapolation from tail fraction `t` to `1 - tau`.
///
/// The estimator's largest level is `t`, i.e. it starts at `t / (m l^R)`.
pub fn pickands_quantile(
    ds: &Dataset,
    fit: &PropensityFit,
    tau: f64,
    t: f64,
    config: &PickandsConfig,
) -> Result<BaselineResult> {
    ds.require_both_arms()?;
    let start = t / config.max_level(1.0);
    let mut theta = [0.0; 2];
    let mut gamma = [0.0; 2];
    for d in [1u8, 0] {
        let sample = ipw_weights(fit, ds, d)?;
        let q = |s: f64| weighted_quantile(&sample, 1.0 - s);
        let est = pickands_evi(q, start, config)?;
        let i = usize::from(1 - d);
        gamma[i] = est.gamma;
        theta[i] = pickands_extrapolate(q, t, config.m, est.gamma, 1.0 - tau)?;
    }
    Ok(BaselineResult {
        method: BaselineMethod::Pickands,
        theta1: theta[0],
        theta0: theta[1],
        delta: theta[0] - theta[1],
        ci: None,
        gamma: Some((gamma[0], gamma[1])),
        at_boundary: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Observation;

    fn two_arm(values1: &[f64], values0: &[f64]) -> Dataset {
        let mut obs: Vec<Observation> = values1.iter().map(|&y| Observation { y, d: 1, x: vec![] }).collect();
        obs.extend(values0.iter().map(|&y| Observation { y, d: 0, x: vec![] }));
        Dataset::new(obs).unwrap()
    }

    #[test]
    fn median_with_constant_propensity() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let ds = two_arm(&v, &v);
        let fit = PropensityFit::constant(&ds, 0.5).unwrap();
        let r = zhang_firpo(&ds, &fit, 0.5, None).unwrap();
        assert_eq!((r.theta1, r.theta0, r.delta), (50.0, 50.0, 0.0));
        assert!(!r.at_boundary);
    }

    #[test]
    fn beyond_sample_is_flagged() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let ds = two_arm(&v, &v);
        let fit = PropensityFit::constant(&ds, 0.5).unwrap();
        let r = zhang_firpo(&ds, &fit, 0.999, None).unwrap();
        assert!(r.at_boundary);
        assert_eq!(r.theta1, 100.0);
    }

    #[test]
    fn constant_outcomes_degenerate_spacing() {
        let ds = two_arm(&[2.0; 500], &[2.0; 500]);
        let fit = PropensityFit::constant(&ds, 0.5).unwrap();
        let r = pickands_quantile(&ds, &fit, 0.999, 0.2, &PickandsConfig::default());
        assert!(matches!(r, Err(Error::DegenerateSpacing(_))));
    }

    #[test]
    fn bootstrap_interval_is_ordered() {
        let v1: Vec<f64> = (1..=200).map(|i| f64::from(i) * 1.5).collect();
        let v0: Vec<f64> = (1..=200).map(f64::from).collect();
        let ds = two_arm(&v1, &v0);
        let fit = PropensityFit::constant(&ds, 0.5).unwrap();
        let r = zhang_firpo(&ds, &fit, 0.5, Some(&BootstrapConfig::new(3))).unwrap();
        let (lo, hi) = r.ci.unwrap();
        assert!(lo <= hi);
    }
}
