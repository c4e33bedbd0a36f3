//! Generalized Pareto tails: quantile/cdf, threshold rule, and weighted
//! maximum-likelihood fits with constant or covariate-dependent scale.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::WeightedSample;
use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::propensity::check_rank;

/// Below this |xi| the exponential limit is used.
pub const XI_ZERO: f64 = 1e-8;
pub const XI_MIN: f64 = -0.9;
pub const XI_MAX: f64 = 5.0;
pub const MIN_EXCEEDANCES: usize = 10;

/// A GPD tail attached at threshold `u` carrying body mass `p_u`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpdTail {
    pub u: f64,
    pub p_u: f64,
    pub sigma: f64,
    pub xi: f64,
    /// Log-linear scale coefficients `log sigma(x) = b0 + b'x`, when fitted.
    pub scale_coefs: Option<Vec<f64>>,
}

impl GpdTail {
    pub fn new(u: f64, p_u: f64, sigma: f64, xi: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Domain(format!("GPD scale {sigma} must be positive")));
        }
        if !(p_u > 0.0 && p_u < 1.0) && p_u != 0.0 {
            return Err(Error::Domain(format!("body mass {p_u} outside [0, 1)")));
        }
        if !u.is_finite() || !xi.is_finite() {
            return Err(Error::Domain("threshold and shape must be finite".into()));
        }
        Ok(Self { u, p_u, sigma, xi, scale_coefs: None })
    }

    /// Same tail with the scale evaluated at covariates `x` (covariate mode).
    pub fn at(&self, x: &[f64]) -> GpdTail {
        match &self.scale_coefs {
            None => self.clone(),
            Some(b) => GpdTail { sigma: log_linear_scale(b, x), scale_coefs: None, ..self.clone() },
        }
    }

    /// Finite upper endpoint when `xi < 0`.
    pub fn upper_endpoint(&self) -> Option<f64> {
        (self.xi < -XI_ZERO).then(|| self.u + self.sigma / self.xi.abs())
    }

    pub fn quantile(&self, tau: f64) -> Result<f64> {
        gpd_quantile(self, tau)
    }

    pub fn cdf(&self, y: f64) -> Result<f64> {
        gpd_cdf(self, y)
    }

    /// Quantile without domain checks; `tau` must lie in `(p_u, 1)`.
    pub fn quantile_unchecked(&self, tau: f64) -> f64 {
        let log_ratio = ((1.0 - self.p_u) / (1.0 - tau)).ln();
        self.u + self.sigma * excess_quantile_factor(self.xi, log_ratio)
    }

    /// Conditional exceedance cdf `P(Y <= y | Y > u)` for `y >= u`.
    pub fn excess_cdf(&self, y: f64) -> f64 {
        let e = y - self.u;
        if e <= 0.0 {
            return 0.0;
        }
        let z = self.xi * e / self.sigma;
        if self.xi.abs() <= XI_ZERO {
            -(-e / self.sigma).exp_m1()
        } else if z <= -1.0 {
            1.0
        } else {
            -(-z.ln_1p() / self.xi).exp_m1()
        }
    }

    /// Density of the excess `e = y - u` under the conditional GPD.
    pub fn excess_density(&self, e: f64) -> f64 {
        gpd_log_density(e, self.sigma, self.xi).exp()
    }
}

/// `(r^xi - 1) / xi` with `r = exp(log_ratio)`, continuous at `xi = 0`.
fn excess_quantile_factor(xi: f64, log_ratio: f64) -> f64 {
    if xi.abs() > XI_ZERO {
        (xi * log_ratio).exp_m1() / xi
    } else {
        log_ratio
    }
}

pub(crate) fn log_linear_scale(coefs: &[f64], x: &[f64]) -> f64 {
    let eta = coefs[0] + coefs[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
    eta.exp()
}

/// `u + (sigma/xi) [((1-p_u)/(1-tau))^xi - 1]`, exponential form near `xi = 0`.
pub fn gpd_quantile(tail: &GpdTail, tau: f64) -> Result<f64> {
    if !(tau > tail.p_u && tau < 1.0) {
        return Err(Error::Domain(format!(
            "target level {tau} is in the body, not the tail (p_u = {})",
            tail.p_u
        )));
    }
    Ok(tail.quantile_unchecked(tau))
}

/// Inverse of [`gpd_quantile`]; values past a finite endpoint map to 1.
pub fn gpd_cdf(tail: &GpdTail, y: f64) -> Result<f64> {
    if y < tail.u || y.is_nan() {
        return Err(Error::Domain(format!("{y} is below the threshold {}", tail.u)));
    }
    Ok(tail.p_u + (1.0 - tail.p_u) * tail.excess_cdf(y))
}

/// `p_u = 1 - n^{-0.35}`, i.e. `k = n^{0.65}` exceedances.
pub fn default_threshold_level(n: usize) -> Result<f64> {
    if n < 20 {
        return Err(Error::TooFewObservations { needed: 20, got: n });
    }
    Ok(1.0 - (n as f64).powf(-0.35))
}

/// Log-density of the GPD excess `e` (−inf outside the support).
pub fn gpd_log_density(e: f64, sigma: f64, xi: f64) -> f64 {
    if sigma <= 0.0 || e < 0.0 {
        return f64::NEG_INFINITY;
    }
    if xi.abs() <= XI_ZERO {
        return -sigma.ln() - e / sigma;
    }
    let z = xi * e / sigma;
    if z <= -1.0 {
        return f64::NEG_INFINITY;
    }
    -sigma.ln() - (1.0 + 1.0 / xi) * z.ln_1p()
}

/// Gradient of [`gpd_log_density`] with respect to `(log sigma, xi)`.
pub fn gpd_log_density_grad(e: f64, sigma: f64, xi: f64) -> [f64; 2] {
    let z = e / sigma;
    if xi.abs() < 1e-6 {
        // series in xi around 0
        let d_eta = -1.0 + z * (1.0 + xi) / (1.0 + xi * z);
        let d_xi = z * z / 2.0 - z + xi * (z * z - 2.0 * z * z * z / 3.0);
        return [d_eta, d_xi];
    }
    let t = 1.0 + xi * z;
    let d_eta = -1.0 + (1.0 + xi) * z / t;
    let d_xi = t.ln() / (xi * xi) - (1.0 + 1.0 / xi) * z / t;
    [d_eta, d_xi]
}

/// Result of a (weighted) GPD fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub sigma: f64,
    pub xi: f64,
    /// True when the optimizer failed and the PWM estimates were returned.
    pub fallback: bool,
    pub log_likelihood: f64,
    pub n_exceedances: usize,
}

fn validate_exceedances(values: &[f64], weights: &[f64]) -> Result<()> {
    let positive = weights.iter().filter(|&&w| w > 0.0).count();
    if values.len() < MIN_EXCEEDANCES || positive < MIN_EXCEEDANCES {
        return Err(Error::InsufficientTailData { needed: MIN_EXCEEDANCES, got: positive.min(values.len()) });
    }
    if values.iter().any(|&e| !(e >= 0.0) || !e.is_finite()) {
        return Err(Error::Domain("exceedances must be finite and nonnegative".into()));
    }
    let first = values[0];
    if values.iter().all(|&e| e == first) {
        return Err(Error::DegenerateTail);
    }
    Ok(())
}

/// Weighted probability-weighted-moment estimates `(sigma, xi)`.
pub fn pwm_estimate(sample: &WeightedSample) -> (f64, f64) {
    let total = sample.total_weight();
    let mut cum = 0.0;
    let (mut a0, mut a1) = (0.0, 0.0);
    for (&e, &w) in sample.values().iter().zip(sample.weights()) {
        let plotting = (cum + 0.5 * w) / total;
        cum += w;
        a0 += w * e;
        a1 += w * e * (1.0 - plotting);
    }
    a0 /= total;
    a1 /= total;
    let denom = a0 - 2.0 * a1;
    if denom.abs() < 1e-300 {
        return (a0.max(1e-12), 0.0);
    }
    let k = a0 / denom - 2.0;
    let sigma = 2.0 * a0 * a1 / denom;
    let xi = (-k).clamp(XI_MIN, XI_MAX);
    let sigma = if sigma > 0.0 { sigma } else { a0.max(1e-12) };
    (sigma, xi)
}

/// Negative weighted log-likelihood; `+inf` outside the parameter box or support.
fn weighted_nll(values: &[f64], weights: &[f64], scales: impl Fn(usize) -> f64, xi: f64) -> f64 {
    if !(XI_MIN..=XI_MAX).contains(&xi) {
        return f64::INFINITY;
    }
    let mut nll = 0.0;
    for (i, (&e, &w)) in values.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let ld = gpd_log_density(e, scales(i), xi);
        if !ld.is_finite() {
            return f64::INFINITY;
        }
        nll -= w * ld;
    }
    nll
}

fn feasible_start(sigma: f64, xi: f64, max_e: f64) -> (f64, f64) {
    let xi = xi.clamp(-0.5, 2.0);
    let sigma = if xi < 0.0 { sigma.max(-xi * max_e * 1.05) } else { sigma };
    (sigma, xi)
}

/// Maximizes the weight-multiplied GPD log-likelihood over `sigma > 0`,
/// `xi` in `[-0.9, 5]` by Nelder–Mead on `(log sigma, xi)`.
pub fn fit_gpd(exceedances: &WeightedSample) -> Result<GpdFit> {
    let values = exceedances.values();
    let total = exceedances.total_weight();
    let weights: Vec<f64> =
        exceedances.weights().iter().map(|w| w * values.len() as f64 / total).collect();
    validate_exceedances(values, &weights)?;

    let (s0, x0) = pwm_estimate(exceedances);
    let max_e = exceedances.max();
    let (s_init, x_init) = feasible_start(s0, x0, max_e);
    let objective = |p: &[f64]| weighted_nll(values, &weights, |_| p[0].exp(), p[1]);
    let min = nelder_mead(objective, &[s_init.ln(), x_init], &[0.3, 0.1], &NelderMeadOptions::default());

    if !min.converged || !min.value.is_finite() {
        let ll = -weighted_nll(values, &weights, |_| s0, x0);
        return Ok(GpdFit {
            sigma: s0,
            xi: x0,
            fallback: true,
            log_likelihood: ll,
            n_exceedances: values.len(),
        });
    }
    Ok(GpdFit {
        sigma: min.x[0].exp(),
        xi: min.x[1],
        fallback: false,
        log_likelihood: -min.value,
        n_exceedances: values.len(),
    })
}

/// GPD fit with `log sigma(x) = b0 + b'x` and constant `xi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateGpdFit {
    /// `[b0, b_1, ..., b_p]`.
    pub scale_coefs: Vec<f64>,
    pub xi: f64,
    pub fallback: bool,
    pub log_likelihood: f64,
    pub n_exceedances: usize,
}

impl CovariateGpdFit {
    pub fn sigma_at(&self, x: &[f64]) -> f64 {
        log_linear_scale(&self.scale_coefs, x)
    }
}

/// Weighted GPD regression on exceedances with covariate rows `covariates[i]`.
/// An empty covariate row for every exceedance gives the intercept-only model.
pub fn fit_gpd_covariate(exceedances: &[f64], weights: &[f64], covariates: &[Vec<f64>]) -> Result<CovariateGpdFit> {
    if exceedances.len() != weights.len() || exceedances.len() != covariates.len() {
        return Err(Error::Usage("exceedances, weights and covariates differ in length".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    let norm_w: Vec<f64> = weights.iter().map(|w| w * exceedances.len() as f64 / total).collect();
    validate_exceedances(exceedances, &norm_w)?;
    let p = covariates.first().map_or(0, Vec::len);
    if covariates.iter().any(|c| c.len() != p) {
        return Err(Error::Usage("covariate rows differ in length".into()));
    }
    if p > 0 {
        let mut design = DMatrix::zeros(exceedances.len(), p + 1);
        for (i, row) in covariates.iter().enumerate() {
            design[(i, 0)] = 1.0;
            for (j, &v) in row.iter().enumerate() {
                design[(i, j + 1)] = v;
            }
        }
        check_rank(&design)?;
    }

    let sample = WeightedSample::new(exceedances.to_vec(), weights.to_vec())?;
    let base = fit_gpd(&sample)?;
    let mut start = vec![0.0; p + 2];
    let (s_init, x_init) = feasible_start(base.sigma, base.xi, sample.max());
    start[0] = s_init.ln();
    start[p + 1] = x_init;
    let mut steps = vec![0.1; p + 2];
    steps[0] = 0.3;

    let objective = |params: &[f64]| {
        let coefs = &params[..=p];
        weighted_nll(exceedances, &norm_w, |i| log_linear_scale(coefs, &covariates[i]), params[p + 1])
    };
    let opts = NelderMeadOptions { max_evals: 4000 + 2000 * p, restarts: 3, ..Default::default() };
    let min = nelder_mead(objective, &start, &steps, &opts);

    if !min.converged || !min.value.is_finite() {
        let mut coefs = vec![0.0; p + 1];
        coefs[0] = base.sigma.ln();
        return Ok(CovariateGpdFit {
            scale_coefs: coefs,
            xi: base.xi,
            fallback: true,
            log_likelihood: base.log_likelihood,
            n_exceedances: exceedances.len(),
        });
    }
    Ok(CovariateGpdFit {
        scale_coefs: min.x[..=p].to_vec(),
        xi: min.x[p + 1],
        fallback: false,
        log_likelihood: -min.value,
        n_exceedances: exceedances.len(),
    })
}
