//! Reconstructed quantile functions, the integrated signal and the exact
//! solution of the discretized estimating equation.

mod grid;
mod moment;
mod recon;

pub use grid::{default_grid_size, Grid, GridKind, MIN_GRID_SIZE};
pub use recon::{reconstruct_quantile, ReconstructedQuantile, TailMode, TailUnit};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, WeightedSample};
use crate::error::{Error, Result};
use crate::evt::gpd::default_threshold_level;
use crate::inference::{self, PhiMethod, SandwichParts, VarianceComponents};
use crate::propensity::{arm_weights, ArmWeights, PropensityFit};

use moment::ArmMoment;

/// Weights entering the signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    /// Unit weights within the arm.
    Naive,
    /// Hájek-normalized inverse propensity weights.
    #[default]
    Ipw,
}

impl std::str::FromStr for Signal {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Self::Naive),
            "ipw" => Ok(Self::Ipw),
            other => Err(Error::Usage(format!("unknown signal `{other}`"))),
        }
    }
}

/// Variance used for intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    /// `sigma^2 / phi'^2`, nuisance estimation ignored.
    Simple,
    /// Threshold, tail and propensity estimation propagated through the sandwich.
    #[default]
    Sandwich,
}

impl std::str::FromStr for VarianceMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple" => Ok(Self::Simple),
            "sandwich" => Ok(Self::Sandwich),
            other => Err(Error::Usage(format!("unknown variance method `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TieeConfig {
    pub tau: f64,
    /// Grid size `K`; defaults to [`default_grid_size`].
    pub grid_size: Option<usize>,
    /// Threshold level; defaults to [`default_threshold_level`].
    pub p_u: Option<f64>,
    pub grid: GridKind,
    pub signal: Signal,
    pub tail_mode: TailMode,
    /// Covariate columns in the tail scale; `None` uses all.
    pub tail_covariates: Option<Vec<usize>>,
    /// Optional validity bound on the solution.
    pub r_star: Option<f64>,
    pub phi: PhiMethod,
    pub variance: VarianceMethod,
    pub alpha: f64,
}

impl TieeConfig {
    pub fn new(tau: f64) -> Self {
        Self {
            tau,
            grid_size: None,
            p_u: None,
            grid: GridKind::default(),
            signal: Signal::default(),
            tail_mode: TailMode::default(),
            tail_covariates: None,
            r_star: None,
            phi: PhiMethod::default(),
            variance: VarianceMethod::default(),
            alpha: 0.10,
        }
    }

    pub fn grid_size_for(&self, n: usize) -> usize {
        self.grid_size.unwrap_or_else(|| default_grid_size(n))
    }

    pub fn p_u_for(&self, n: usize) -> Result<f64> {
        match self.p_u {
            Some(p) => Ok(p),
            None => default_threshold_level(n),
        }
    }

    pub fn tail_covariates_for(&self, ds: &Dataset) -> Vec<usize> {
        match (&self.tail_covariates, self.tail_mode) {
            (_, TailMode::Constant) => Vec::new(),
            (Some(c), _) => c.clone(),
            (None, _) => (0..ds.cov_dim()).collect(),
        }
    }

    fn validate(&self, n: usize) -> Result<(f64, usize)> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Domain(format!("tau {} outside (0, 1)", self.tau)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Domain(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        let p_u = self.p_u_for(n)?;
        if !(p_u > 0.0 && p_u < 1.0) {
            return Err(Error::Domain(format!("p_u {p_u} outside (0, 1)")));
        }
        let k = self.grid_size_for(n);
        if k < MIN_GRID_SIZE {
            return Err(Error::Usage(format!("grid size {k} below {MIN_GRID_SIZE}")));
        }
        if self.grid == GridKind::Uniform && (k as f64) < 10.0 / (1.0 - self.tau) {
            log::warn!("uniform grid K = {k} resolves tail mass {} coarsely", 1.0 - self.tau);
        }
        Ok((p_u, k))
    }
}

/// Tail-relative level `(tau - p_u) / (1 - p_u)`.
pub fn tau_eff(tau: f64, p_u: f64) -> f64 {
    (tau - p_u) / (1.0 - p_u)
}

/// `S_n(theta) = sum_i w_i sum_k 1{Q_i(p_k) <= theta} (p_k - p_{k-1}) / sum_i w_i`.
pub fn integrated_signal<Q>(curves: &[Q], weights: &[f64], grid: &Grid, theta: f64) -> Result<f64>
where
    Q: Fn(f64) -> f64,
{
    if curves.len() != weights.len() || curves.is_empty() {
        return Err(Error::Usage("one weight per curve is required".into()));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let mut s = 0.0;
    for (q, &w) in curves.iter().zip(weights) {
        let inner: f64 = grid.steps().filter(|&(p, _)| q(p) <= theta).map(|(_, dp)| dp).sum();
        s += w * inner;
    }
    Ok(s / total)
}

/// Smallest atom at which the cumulative (unnormalized) atom mass reaches `tau`.
pub fn solve_atoms(atoms: &WeightedSample, tau: f64) -> Result<f64> {
    let target = tau * (1.0 - 1e-12);
    let values = atoms.values();
    let weights = atoms.weights();
    let mut cum = 0.0;
    let mut i = 0;
    while i < values.len() {
        let v = values[i];
        while i < values.len() && values[i] == v {
            cum += weights[i];
            i += 1;
        }
        if cum >= target {
            return Ok(v);
        }
    }
    Err(Error::ExtrapolationBound { reached: cum, target: tau })
}

/// Solution of the discretized equation for one reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct TieeSolution {
    pub theta_hat: f64,
    pub atoms: WeightedSample,
    pub grid: Grid,
}

pub fn solve_tiee(recon: &ReconstructedQuantile, grid: &Grid, tau: f64, r_star: Option<f64>) -> Result<TieeSolution> {
    let atoms = recon.atoms(grid)?;
    if let Some(r) = r_star {
        let reached = inference::signal_mass(&atoms, r);
        if reached < tau {
            log::warn!("S_n(R*) = {reached} below tau = {tau}; ignoring the bound");
        }
    }
    let theta_hat = solve_atoms(&atoms, tau)?;
    Ok(TieeSolution { theta_hat, atoms, grid: grid.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TieeEstimate {
    pub arm: u8,
    pub tau: f64,
    pub theta_hat: f64,
    /// Variance of the moment values.
    pub sigma_sq: f64,
    /// Derivative of the estimating equation at the solution.
    pub phi_prime: Option<f64>,
    /// Reason the derivative could not be formed.
    pub phi_error: Option<String>,
    /// Per-observation moment values over the full sample.
    pub g_values: Vec<f64>,
    /// Moment values net of nuisance estimation (equal to `g_values` for the simple variance).
    pub adjusted: Vec<f64>,
    /// Per-arm variance `Var(adjusted) / phi'^2`.
    pub variance: Option<f64>,
    pub p_u: f64,
    pub u: f64,
    pub xi: f64,
    pub scale_coefs: Vec<f64>,
    pub grid_size: usize,
    pub tau_eff: f64,
    pub n_exceedances: usize,
    pub tail_fallback: bool,
}

fn signal_weights(ds: &Dataset, fit: &PropensityFit, d: u8, signal: Signal) -> Result<ArmWeights> {
    match signal {
        Signal::Naive => ArmWeights::uniform(ds, d),
        Signal::Ipw => arm_weights(fit, ds, d),
    }
}

/// Full per-arm pipeline: weights, reconstruction, solve, moments, derivative.
pub fn estimate_arm(ds: &Dataset, fit: &PropensityFit, d: u8, config: &TieeConfig) -> Result<TieeEstimate> {
    let (est, _) = estimate_arm_parts(ds, fit, d, config)?;
    Ok(est)
}

fn estimate_arm_parts(
    ds: &Dataset,
    fit: &PropensityFit,
    d: u8,
    config: &TieeConfig,
) -> Result<(TieeEstimate, Option<SandwichParts>)> {
    ds.require_both_arms()?;
    let (p_u, k) = config.validate(ds.n())?;
    let weights = signal_weights(ds, fit, d, config.signal)?;
    let cols = config.tail_covariates_for(ds);
    let recon = reconstruct_quantile(ds, &weights, p_u, config.tail_mode, &cols)?;
    let grid = Grid::build(config.grid, k, p_u, config.tau)?;
    let sol = solve_tiee(&recon, &grid, config.tau, config.r_star)?;
    let theta = sol.theta_hat;

    let prop = match config.signal {
        Signal::Ipw if fit.n_params() > 0 => Some(fit),
        _ => None,
    };
    let moment = ArmMoment::new(ds, d, config.tau, &recon, prop);
    let out = match config.variance {
        VarianceMethod::Simple => moment.simple(theta),
        VarianceMethod::Sandwich => moment.sandwich(theta)?,
    };
    let sigma_sq = inference::moment_variance(&out.g)?;

    let phi = match config.phi {
        PhiMethod::TailDensity | PhiMethod::Auto if theta > recon.u => {
            let f = recon.tail_density(theta);
            if f > 0.0 && f.is_finite() {
                Ok(f)
            } else {
                Err(Error::FlatMoment(theta))
            }
        }
        method => inference::phi_derivative(&sol.atoms, theta, method),
    };
    let (phi_prime, phi_error, variance) = match phi {
        Ok(f) => {
            let v = inference::moment_variance(&out.adjusted)? / (f * f);
            (Some(f), None, Some(v))
        }
        Err(e) => {
            log::warn!("arm {d}: {e}");
            (None, Some(e.to_string()), None)
        }
    };

    let est = TieeEstimate {
        arm: d,
        tau: config.tau,
        theta_hat: theta,
        sigma_sq,
        phi_prime,
        phi_error,
        g_values: out.g,
        adjusted: out.adjusted,
        variance,
        p_u,
        u: recon.u,
        xi: recon.xi,
        scale_coefs: recon.scale_coefs.clone(),
        grid_size: grid.len(),
        tau_eff: tau_eff(config.tau, p_u),
        n_exceedances: recon.n_exceedances,
        tail_fallback: recon.fallback,
    };
    Ok((est, out.parts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqteResult {
    pub tau: f64,
    pub theta1: f64,
    pub theta0: f64,
    pub delta: f64,
    pub components: Option<VarianceComponents>,
    pub sigma_delta_sq: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub alpha: f64,
    pub n: usize,
    /// Why no interval was formed.
    pub ci_error: Option<String>,
}

/// `delta = theta_1 - theta_0`; variance fields are left empty.
pub fn eqte(est1: &TieeEstimate, est0: &TieeEstimate) -> Result<EqteResult> {
    if est1.tau != est0.tau {
        return Err(Error::Usage(format!("arm levels differ: {} vs {}", est1.tau, est0.tau)));
    }
    Ok(EqteResult {
        tau: est1.tau,
        theta1: est1.theta_hat,
        theta0: est0.theta_hat,
        delta: est1.theta_hat - est0.theta_hat,
        components: None,
        sigma_delta_sq: None,
        ci: None,
        alpha: 0.10,
        n: est1.g_values.len(),
        ci_error: None,
    })
}

/// Both arms with joint inference on the treatment effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TieeFit {
    pub arm1: TieeEstimate,
    pub arm0: TieeEstimate,
    pub eqte: EqteResult,
}

pub fn estimate_eqte(ds: &Dataset, fit: &PropensityFit, config: &TieeConfig) -> Result<TieeFit> {
    let arm1 = estimate_arm(ds, fit, 1, config)?;
    let arm0 = estimate_arm(ds, fit, 0, config)?;
    let mut result = eqte(&arm1, &arm0)?;
    result.alpha = config.alpha;
    match (arm1.phi_prime, arm0.phi_prime) {
        (Some(p1), Some(p0)) => {
            let comps = VarianceComponents::from_moments(&arm1.adjusted, &arm0.adjusted, p1, p0)?;
            let v = inference::eqte_variance(&comps)?;
            result.ci = Some(inference::confidence_interval(result.delta, v, ds.n(), config.alpha)?);
            result.sigma_delta_sq = Some(v);
            result.components = Some(comps);
        }
        _ => {
            let msg = arm1.phi_error.clone().or_else(|| arm0.phi_error.clone());
            result.ci_error = msg;
        }
    }
    Ok(TieeFit { arm1, arm0, eqte: result })
}

/// Sandwich blocks for one arm (diagnostics).
pub fn sandwich_parts(ds: &Dataset, fit: &PropensityFit, d: u8, config: &TieeConfig) -> Result<Option<SandwichParts>> {
    Ok(estimate_arm_parts(ds, fit, d, config)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::weighted_quantile;
    use crate::evt::gpd::GpdTail;

    #[test]
    fn identity_curve_signal() {
        let grid = Grid::uniform(800).unwrap();
        let s = integrated_signal(&[|p: f64| p], &[1.0], &grid, 0.5).unwrap();
        assert!((s - 0.5).abs() <= 1.0 / 800.0);
    }

    #[test]
    fn signal_extremes() {
        let grid = Grid::uniform(100).unwrap();
        let curves = [|p: f64| p, |p: f64| 2.0 * p];
        assert_eq!(integrated_signal(&curves, &[1.0, 1.0], &grid, -1.0).unwrap(), 0.0);
        let s = integrated_signal(&curves, &[1.0, 1.0], &grid, 2.0).unwrap();
        assert!((s - grid.last()).abs() < 1e-12);
    }

    #[test]
    fn exponential_target() {
        let tail = GpdTail::new(0.0, 0.0, 1.0, 0.0).unwrap();
        let r = ReconstructedQuantile::from_tail(None, &tail).unwrap();
        let grid = Grid::uniform(2000).unwrap();
        let sol = solve_tiee(&r, &grid, 0.99, None).unwrap();
        let k = grid.levels().iter().position(|&p| p >= 0.99 - 1e-12).unwrap();
        let cell = (-(1.0 - grid.levels()[k + 1]).ln()) - (-(1.0 - grid.levels()[k]).ln());
        assert!((sol.theta_hat - 0.01f64.ln().abs()).abs() <= cell);
    }

    #[test]
    fn point_mass_body() {
        let body = WeightedSample::unweighted(vec![3.0; 10]).unwrap();
        let tail = GpdTail::new(3.0, 0.9, 1e-12, 0.0).unwrap();
        let r = ReconstructedQuantile::from_tail(Some(body), &tail).unwrap();
        let grid = Grid::tail_calibrated(200, 0.9, 0.5).unwrap();
        for tau in [0.1, 0.5, 0.9] {
            assert_eq!(solve_tiee(&r, &grid, tau, None).unwrap().theta_hat, 3.0);
        }
    }

    #[test]
    fn body_target_matches_weighted_quantile() {
        let vals: Vec<f64> = (0..40).map(|i| ((i * 37) % 41) as f64).collect();
        let body = WeightedSample::unweighted(vals).unwrap();
        let u = weighted_quantile(&body, 0.9).unwrap();
        let tail = GpdTail::new(u, 0.9, 1.0, 0.1).unwrap();
        let r = ReconstructedQuantile::from_tail(Some(body.clone()), &tail).unwrap();
        let grid = Grid::tail_calibrated(200, 0.9, 0.5).unwrap();
        for tau in [0.1, 0.33, 0.5, 0.77] {
            let rounded = grid.round_up(tau).unwrap();
            let want = weighted_quantile(&body, rounded).unwrap();
            assert_eq!(solve_tiee(&r, &grid, tau, None).unwrap().theta_hat, want);
        }
    }

    #[test]
    fn beyond_support() {
        let tail = GpdTail::new(0.0, 0.0, 1.0, 0.0).unwrap();
        let r = ReconstructedQuantile::from_tail(None, &tail).unwrap();
        let grid = Grid::uniform(100).unwrap();
        assert!(matches!(solve_tiee(&r, &grid, 0.995, None), Err(Error::ExtrapolationBound { .. })));
    }

    #[test]
    fn eqte_subtraction() {
        let mk = |theta: f64, tau: f64| TieeEstimate {
            arm: 1,
            tau,
            theta_hat: theta,
            sigma_sq: 0.0,
            phi_prime: None,
            phi_error: None,
            g_values: vec![],
            adjusted: vec![],
            variance: None,
            p_u: 0.9,
            u: 0.0,
            xi: 0.0,
            scale_coefs: vec![0.0],
            grid_size: 100,
            tau_eff: 0.0,
            n_exceedances: 0,
            tail_fallback: false,
        };
        assert_eq!(eqte(&mk(5.0, 0.9), &mk(2.0, 0.9)).unwrap().delta, 3.0);
        assert_eq!(eqte(&mk(2.0, 0.9), &mk(2.0, 0.9)).unwrap().delta, 0.0);
        assert!(matches!(eqte(&mk(2.0, 0.9), &mk(2.0, 0.8)), Err(Error::Usage(_))));
    }
}
