//! Extreme value index estimators (causal Hill, Pickands) and the matching
//! quantile extrapolations.

use serde::{Deserialize, Serialize};

use crate::dataset::{weighted_quantile, Dataset, WeightedSample};
use crate::error::{Error, Result};
use crate::propensity::PropensityFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EviMethod {
    Hill,
    Pickands,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EviEstimate {
    pub gamma: f64,
    pub method: EviMethod,
    /// Tail fraction `tau_bar` (mass above the intermediate quantile).
    pub tail_fraction: f64,
    /// Intermediate quantile `q(1 - tau_bar)`.
    pub intermediate: f64,
}

/// `(1/normalizer) * sum_i w_i (log y_i - log q) 1{y_i > q}`.
pub fn hill_weighted(values: &[f64], weights: &[f64], threshold: f64, normalizer: f64) -> Result<f64> {
    if values.len() != weights.len() {
        return Err(Error::Usage("values and weights differ in length".into()));
    }
    if !(normalizer > 0.0) {
        return Err(Error::Domain(format!("normalizer {normalizer} must be positive")));
    }
    if threshold <= 0.0 && values.iter().any(|&y| y > threshold) {
        return Err(Error::LogDomain(threshold));
    }
    let log_q = threshold.ln();
    let mut sum = 0.0;
    let mut count = 0;
    for (&y, &w) in values.iter().zip(weights) {
        if y > threshold {
            sum += w * (y.ln() - log_q);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InsufficientTailData { needed: 1, got: 0 });
    }
    Ok(sum / normalizer)
}

/// Minimum number of arm exceedances required by [`hill_causal`].
pub const HILL_MIN_EXCEEDANCES: usize = 10;

/// Causal Hill estimator for arm `d` with raw inverse propensity weights.
///
/// `tail_fraction` is the mass `tau_bar` above the IPW-weighted intermediate
/// quantile `q(1 - tau_bar)`.
pub fn hill_causal(dataset: &Dataset, fit: &PropensityFit, d: u8, tail_fraction: f64) -> Result<EviEstimate> {
    if !(tail_fraction > 0.0 && tail_fraction < 1.0) {
        return Err(Error::Domain(format!("tail fraction {tail_fraction} outside (0, 1)")));
    }
    let idx = dataset.arm_indices(d);
    if idx.is_empty() {
        return Err(Error::EmptyArm(d));
    }
    let values: Vec<f64> = idx.iter().map(|&i| dataset.get(i).y).collect();
    let weights: Vec<f64> = idx.iter().map(|&i| 1.0 / fit.arm_probability(i, d)).collect();
    let sample = WeightedSample::new(values.clone(), weights.clone())?;
    let q = weighted_quantile(&sample, 1.0 - tail_fraction)?;
    let exceed = values.iter().filter(|&&y| y > q).count();
    if exceed == 0 && q > 0.0 && sample.max() == q {
        // top of the arm is an atom at the intermediate level: all log-excesses vanish
        return Ok(EviEstimate { gamma: 0.0, method: EviMethod::Hill, tail_fraction, intermediate: q });
    }
    if exceed < HILL_MIN_EXCEEDANCES {
        return Err(Error::InsufficientTailData { needed: HILL_MIN_EXCEEDANCES, got: exceed });
    }
    if q <= 0.0 {
        return Err(Error::LogDomain(q));
    }
    let gamma = hill_weighted(&values, &weights, q, dataset.n() as f64 * tail_fraction)?;
    Ok(EviEstimate { gamma, method: EviMethod::Hill, tail_fraction, intermediate: q })
}

/// Weissman extrapolation `q * (tail_fraction / p)^gamma`, heavy tails only.
pub fn hill_extrapolate(q_intermediate: f64, tail_fraction: f64, p: f64, gamma: f64) -> Result<f64> {
    if !(p > 0.0 && p <= tail_fraction && tail_fraction < 1.0) {
        return Err(Error::Domain(format!("need 0 < p ({p}) <= tail fraction ({tail_fraction}) < 1")));
    }
    if !(gamma > 0.0) {
        return Err(Error::HeavyTailViolation(gamma));
    }
    Ok(q_intermediate * (tail_fraction / p).powf(gamma))
}

/// Spacing `l`, ratio `m`, number of terms `R` and weights of the Pickands-type estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PickandsConfig {
    pub l: f64,
    pub m: f64,
    pub weights: Vec<f64>,
}

impl Default for PickandsConfig {
    fn default() -> Self {
        Self { l: 2.0, m: 2.0, weights: vec![1.0 / 3.0; 3] }
    }
}

impl PickandsConfig {
    pub fn r(&self) -> usize {
        self.weights.len()
    }

    /// Largest tail probability touched when started at `tau`.
    pub fn max_level(&self, tau: f64) -> f64 {
        let r = self.r() as f64;
        tau * self.m.max(1.0) * self.l.powf(r).max(1.0)
    }

    fn validate(&self) -> Result<()> {
        if !(self.l > 0.0) || self.l == 1.0 {
            return Err(Error::Domain(format!("spacing l = {} must be positive and not 1", self.l)));
        }
        if !(self.m > 1.0) {
            return Err(Error::Domain(format!("ratio m = {} must exceed 1", self.m)));
        }
        if self.weights.is_empty() || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Domain("Pickands weights must be nonempty and sum to 1".into()));
        }
        Ok(())
    }
}

/// Pickands-type EVI from an upper-tail quantile function `q(t) = Q(1 - t)`.
///
/// Uses spacings `s_r = q(l^r tau) - q(m l^r tau)` and
/// `gamma = -sum_r w_r [log s_r - log s_{r-1}] / log l`.
pub fn pickands_evi<F>(quantile_fn: F, tau: f64, config: &PickandsConfig) -> Result<EviEstimate>
where
    F: Fn(f64) -> Result<f64>,
{
    config.validate()?;
    let (l, m) = (config.l, config.m);
    let spacing = |r: usize| -> Result<f64> {
        let lo = l.powi(r as i32) * tau;
        let hi = m * lo;
        for level in [lo, hi] {
            if !(level > 0.0 && level < 1.0) {
                return Err(Error::Domain(format!("Pickands level {level} outside (0, 1)")));
            }
        }
        let s = quantile_fn(lo)? - quantile_fn(hi)?;
        if !(s > 0.0) {
            return Err(Error::DegenerateSpacing(s));
        }
        Ok(s.ln())
    };
    let mut prev = spacing(0)?;
    let mut gamma = 0.0;
    for (r, w) in config.weights.iter().enumerate() {
        let cur = spacing(r + 1)?;
        gamma -= w * (cur - prev) / l.ln();
        prev = cur;
    }
    Ok(EviEstimate { gamma, method: EviMethod::Pickands, tail_fraction: tau, intermediate: quantile_fn(tau)? })
}

/// GPD-consistent extrapolation from tail probability `t` to `p`:
/// `q(t) + [q(t/m) - q(t)] ((t/p)^gamma - 1) / (m^gamma - 1)`.
pub fn pickands_extrapolate<F>(quantile_fn: F, t: f64, m: f64, gamma: f64, p: f64) -> Result<f64>
where
    F: Fn(f64) -> Result<f64>,
{
    if !(p > 0.0 && t > 0.0 && t < 1.0 && m > 1.0) {
        return Err(Error::Domain("need p > 0, 0 < t < 1 and m > 1".into()));
    }
    let base = quantile_fn(t)?;
    let spread = quantile_fn(t / m)? - base;
    if !(spread > 0.0) {
        return Err(Error::DegenerateSpacing(spread));
    }
    let factor = if gamma.abs() < 1e-10 {
        (t / p).ln() / m.ln()
    } else {
        ((t / p).powf(gamma) - 1.0) / (m.powf(gamma) - 1.0)
    };
    Ok(base + spread * factor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evt::gpd::GpdTail;

    #[test]
    fn hill_hand_value() {
        let e = std::f64::consts::E;
        let g = hill_weighted(&[e, e * e, e * e * e], &[1.0; 3], 1.0, 3.0).unwrap();
        assert!((g - 2.0).abs() < 1e-12);
    }

    #[test]
    fn hill_without_exceedances() {
        assert_eq!(
            hill_weighted(&[1.0, 2.0], &[1.0, 1.0], 5.0, 1.0),
            Err(Error::InsufficientTailData { needed: 1, got: 0 })
        );
    }

    #[test]
    fn hill_nonpositive_threshold() {
        assert!(matches!(hill_weighted(&[-1.0, 2.0], &[1.0, 1.0], -0.5, 1.0), Err(Error::LogDomain(_))));
    }

    #[test]
    fn weissman_extrapolation() {
        let q = hill_extrapolate(10.0, 0.01, 0.001, 0.5).unwrap();
        assert!((q - 31.6228).abs() < 1e-4);
        assert_eq!(hill_extrapolate(10.0, 0.01, 0.01, 0.5).unwrap(), 10.0);
        assert_eq!(hill_extrapolate(10.0, 0.01, 0.001, -0.1), Err(Error::HeavyTailViolation(-0.1)));
    }

    fn gpd_upper(xi: f64) -> impl Fn(f64) -> Result<f64> {
        let tail = GpdTail::new(0.0, 0.0, 1.0, xi).unwrap();
        move |t| tail.quantile(1.0 - t)
    }

    #[test]
    fn pickands_exact_on_gpd() {
        let cfg = PickandsConfig { l: 2.0, m: 2.0, weights: vec![1.0] };
        let est = pickands_evi(gpd_upper(0.5), 0.01, &cfg).unwrap();
        assert!((est.gamma - 0.5).abs() < 1e-10);
        let est = pickands_evi(gpd_upper(0.0), 0.01, &cfg).unwrap();
        assert!(est.gamma.abs() < 1e-6);
        let est = pickands_evi(gpd_upper(-0.3), 0.01, &PickandsConfig::default()).unwrap();
        assert!((est.gamma + 0.3).abs() < 1e-10);
    }

    #[test]
    fn pickands_constant_quantiles() {
        let cfg = PickandsConfig::default();
        assert!(matches!(pickands_evi(|_| Ok(3.0), 0.01, &cfg), Err(Error::DegenerateSpacing(_))));
    }

    #[test]
    fn pickands_level_beyond_one() {
        let cfg = PickandsConfig::default();
        assert!(matches!(pickands_evi(gpd_upper(0.5), 0.2, &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn pickands_extrapolation_exact_on_gpd() {
        for xi in [0.5, 0.0, -0.3] {
            let q = gpd_upper(xi);
            let got = pickands_extrapolate(&q, 0.05, 2.0, xi, 1e-4).unwrap();
            let want = q(1e-4).unwrap();
            assert!((got - want).abs() < 1e-6 * want.abs().max(1.0), "{xi}: {got} vs {want}");
        }
    }
}
