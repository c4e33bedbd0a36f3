//! Monte Carlo harness: scenarios, regimes, the oracle, replicate campaigns
//! and the robustness and sensitivity studies.

pub mod dgp;
pub mod oracle;
pub mod rng;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, BootstrapConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evt::index::PickandsConfig;
use crate::propensity::{fit_glm, DesignSpec, Link, PropensityFit};
use crate::tiee::{estimate_eqte, TieeConfig};

pub use dgp::{generate, DgpSpec, PotentialOutcomes, Scenario};
pub use oracle::{oracle_from_sampler, true_eqte_oracle, OracleEstimate, ORACLE_BLOCKS};
pub use rng::derive_seed;

/// Default oracle sample size.
pub const DEFAULT_ORACLE_DRAWS: usize = 10_000_000;
const ORACLE_SEED: u64 = 0x5EED_0AC1;

/// Target tail probability `1 - tau_n` as a function of `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    FiveOverN,
    OneOverN,
    FiveOverNLogN,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Self::FiveOverN, Self::OneOverN, Self::FiveOverNLogN];

    pub fn name(self) -> &'static str {
        match self {
            Self::FiveOverN => "5_over_n",
            Self::OneOverN => "1_over_n",
            Self::FiveOverNLogN => "5_over_nlogn",
        }
    }

    pub fn tail_prob(self, n: usize) -> f64 {
        let n = n as f64;
        match self {
            Self::FiveOverN => 5.0 / n,
            Self::OneOverN => 1.0 / n,
            Self::FiveOverNLogN => 5.0 / (n * n.ln()),
        }
    }

    pub fn tau(self, n: usize) -> f64 {
        1.0 - self.tail_prob(n)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Usage(format!("unknown regime `{s}` (expected 5_over_n, 1_over_n or 5_over_nlogn)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tiee,
    ZhangFirpo,
    CausalHill,
    Pickands,
}

impl Method {
    pub const ALL: [Method; 4] = [Self::Tiee, Self::ZhangFirpo, Self::CausalHill, Self::Pickands];

    pub fn name(self) -> &'static str {
        match self {
            Self::Tiee => "tiee",
            Self::ZhangFirpo => "zhang_firpo",
            Self::CausalHill => "causal_hill",
            Self::Pickands => "pickands",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        match key.as_str() {
            "tiee" => Ok(Self::Tiee),
            "zhang_firpo" | "zf" => Ok(Self::ZhangFirpo),
            "causal_hill" | "hill" => Ok(Self::CausalHill),
            "pickands" => Ok(Self::Pickands),
            _ => Err(Error::Usage(format!(
                "unknown method `{s}` (expected tiee, zhang_firpo, causal_hill or pickands)"
            ))),
        }
    }
}

/// Point estimate and optional interval from any estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub theta1: f64,
    pub theta0: f64,
    pub delta: f64,
    pub ci: Option<(f64, f64)>,
}

/// Per-run estimator settings shared by every replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSettings {
    pub p_u: Option<f64>,
    pub grid_size: Option<usize>,
    pub alpha: f64,
    /// Covariates entering the GPD scale; `None` uses all.
    pub tail_covariates: Option<Vec<usize>>,
    /// Bootstrap resamples for Zhang-Firpo intervals; 0 skips the interval.
    pub bootstrap_resamples: usize,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self { p_u: None, grid_size: None, alpha: 0.10, tail_covariates: None, bootstrap_resamples: 500 }
    }
}

impl EstimatorSettings {
    pub fn tiee_config(&self, tau: f64) -> TieeConfig {
        let mut cfg = TieeConfig::new(tau);
        cfg.p_u = self.p_u;
        cfg.grid_size = self.grid_size;
        cfg.alpha = self.alpha;
        cfg.tail_covariates = self.tail_covariates.clone();
        cfg
    }
}

/// Runs `method` on one dataset with a given propensity fit.
pub fn run_method(
    method: Method,
    ds: &Dataset,
    fit: &PropensityFit,
    tau: f64,
    settings: &EstimatorSettings,
    seed: u64,
) -> Result<Estimate> {
    let from_baseline = |r: baselines::BaselineResult| Estimate {
        theta1: r.theta1,
        theta0: r.theta0,
        delta: r.delta,
        ci: r.ci,
    };
    match method {
        Method::Tiee => {
            let fit = estimate_eqte(ds, fit, &settings.tiee_config(tau))?;
            let e = fit.eqte;
            Ok(Estimate { theta1: e.theta1, theta0: e.theta0, delta: e.delta, ci: e.ci })
        }
        Method::ZhangFirpo => {
            let boot = (settings.bootstrap_resamples > 0).then(|| BootstrapConfig {
                resamples: settings.bootstrap_resamples,
                alpha: settings.alpha,
                seed,
            });
            baselines::zhang_firpo(ds, fit, tau, boot.as_ref()).map(from_baseline)
        }
        Method::CausalHill => {
            let t = baselines::default_tail_fraction(ds.n());
            baselines::causal_hill(ds, fit, tau, t, settings.alpha).map(from_baseline)
        }
        Method::Pickands => {
            let t = baselines::default_tail_fraction(ds.n());
            baselines::pickands_quantile(ds, fit, tau, t, &PickandsConfig::default()).map(from_baseline)
        }
    }
}

/// The correctly specified propensity model of the simulation designs:
/// identity link on `(1, x^2)`.
pub fn true_design() -> DesignSpec {
    DesignSpec::intercept_only(Link::Identity).with_power(0, 2)
}

/// One replicate campaign over a fixed scenario, sample size and regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub regime: Regime,
    pub reps: usize,
    pub base_seed: u64,
    pub methods: Vec<Method>,
    pub design: DesignSpec,
    pub spurious: bool,
    pub settings: EstimatorSettings,
    pub oracle_draws: usize,
    /// Replaces the oracle when set.
    pub truth: Option<f64>,
}

impl McConfig {
    pub fn new(scenario: Scenario, regime: Regime, reps: usize, base_seed: u64) -> Self {
        Self {
            scenario,
            n: 1000,
            regime,
            reps,
            base_seed,
            methods: vec![Method::Tiee],
            design: true_design(),
            spurious: false,
            settings: EstimatorSettings::default(),
            oracle_draws: DEFAULT_ORACLE_DRAWS,
            truth: None,
        }
    }

    pub fn tau(&self) -> f64 {
        self.regime.tau(self.n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub index: usize,
    pub seed: u64,
    pub outcome: std::result::Result<Estimate, String>,
}

/// Aggregates for one estimator within a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub scenario: Scenario,
    pub method: Method,
    pub regime: Regime,
    pub n: usize,
    pub tau: f64,
    pub truth: f64,
    /// Successful replicates.
    pub reps: usize,
    /// Failure count per error kind.
    pub failures: BTreeMap<String, usize>,
    pub replicates: Vec<Replicate>,
    pub bias: f64,
    pub mse: f64,
    /// Share of intervals covering the truth; `None` when no interval was formed.
    pub coverage: Option<f64>,
}

impl McResult {
    fn aggregate(cfg: &McConfig, method: Method, truth: f64, replicates: Vec<Replicate>) -> Result<Self> {
        let mut failures = BTreeMap::new();
        let (mut sum, mut sq, mut reps) = (0.0, 0.0, 0usize);
        let (mut covered, mut with_ci) = (0usize, 0usize);
        for r in &replicates {
            match &r.outcome {
                Ok(e) => {
                    let dev = e.delta - truth;
                    sum += dev;
                    sq += dev * dev;
                    reps += 1;
                    if let Some((lo, hi)) = e.ci {
                        with_ci += 1;
                        covered += usize::from(lo <= truth && truth <= hi);
                    }
                }
                Err(kind) => *failures.entry(kind.clone()).or_insert(0) += 1,
            }
        }
        if reps == 0 {
            let modal = failures
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(k, _)| k.clone())
                .unwrap_or_default();
            return Err(Error::CampaignFailed { reps: replicates.len(), modal });
        }
        Ok(Self {
            scenario: cfg.scenario,
            method,
            regime: cfg.regime,
            n: cfg.n,
            tau: cfg.tau(),
            truth,
            reps,
            failures,
            replicates,
            bias: sum / reps as f64,
            mse: sq / reps as f64,
            coverage: (with_ci > 0).then(|| covered as f64 / with_ci as f64),
        })
    }

    pub fn n_failed(&self) -> usize {
        self.failures.values().sum()
    }
}

/// Campaign output: the truth used and one result per method, in the
/// order requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub config: McConfig,
    pub oracle: Option<OracleEstimate>,
    pub truth: f64,
    pub results: Vec<McResult>,
}

/// Truth for a configuration: the override, else the oracle.
pub fn campaign_truth(cfg: &McConfig) -> Result<(f64, Option<OracleEstimate>)> {
    match cfg.truth {
        Some(t) => Ok((t, None)),
        None => {
            let seed = derive_seed(ORACLE_SEED, cfg.scenario as u64);
            let o = true_eqte_oracle(cfg.scenario, cfg.tau(), cfg.oracle_draws, seed)?;
            Ok((o.delta, Some(o)))
        }
    }
}

/// Runs every replicate for every method. Replicate `r` uses seed
/// `derive_seed(base_seed, r)`; all methods see the same dataset and fit.
pub fn run_campaign(cfg: &McConfig) -> Result<Campaign> {
    if cfg.reps == 0 {
        return Err(Error::Usage("reps must be at least 1".into()));
    }
    if cfg.methods.is_empty() {
        return Err(Error::Usage("no method requested".into()));
    }
    let (truth, oracle) = campaign_truth(cfg)?;
    let tau = cfg.tau();
    let per_rep: Vec<Vec<Replicate>> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(cfg.base_seed, r as u64);
            let outcomes = replicate(cfg, seed, tau);
            outcomes
                .into_iter()
                .map(|outcome| Replicate { index: r, seed, outcome: outcome.map_err(|e| e.kind().to_string()) })
                .collect()
        })
        .collect();

    let mut results = Vec::with_capacity(cfg.methods.len());
    for (m, &method) in cfg.methods.iter().enumerate() {
        let reps = per_rep.iter().map(|row| row[m].clone()).collect();
        results.push(McResult::aggregate(cfg, method, truth, reps)?);
    }
    Ok(Campaign { config: cfg.clone(), oracle, truth, results })
}

fn replicate(cfg: &McConfig, seed: u64, tau: f64) -> Vec<Result<Estimate>> {
    let spec = DgpSpec { scenario: cfg.scenario, n: cfg.n, seed, spurious: cfg.spurious };
    let prepared = generate(&spec).and_then(|(ds, _)| {
        let fit = fit_glm(&ds, &cfg.design)?;
        Ok((ds, fit))
    });
    match prepared {
        Ok((ds, fit)) => cfg
            .methods
            .iter()
            .map(|&m| run_method(m, &ds, &fit, tau, &cfg.settings, derive_seed(seed, 1 + m as u64)))
            .collect(),
        Err(e) => cfg.methods.iter().map(|_| Err(e.clone())).collect(),
    }
}

/// Single-method campaign.
pub fn run_mc(
    scenario: Scenario,
    method: Method,
    regime: Regime,
    reps: usize,
    base_seed: u64,
    overrides: &EstimatorSettings,
) -> Result<McResult> {
    let mut cfg = McConfig::new(scenario, regime, reps, base_seed);
    cfg.methods = vec![method];
    cfg.settings = overrides.clone();
    Ok(run_campaign(&cfg)?.results.remove(0))
}

/// A propensity specification evaluated by the robustness study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityVariant {
    pub name: &'static str,
    pub design: DesignSpec,
    pub spurious: bool,
}

/// Correct model plus the four misspecifications.
pub fn propensity_variants() -> Vec<PropensityVariant> {
    let id = || DesignSpec::intercept_only(Link::Identity);
    vec![
        PropensityVariant { name: "true_model", design: true_design(), spurious: false },
        PropensityVariant { name: "polynomial_basis", design: id().with_power(0, 1).with_power(0, 2), spurious: false },
        PropensityVariant { name: "linear_form", design: id().with_power(0, 1), spurious: false },
        PropensityVariant {
            name: "logit_link",
            design: DesignSpec::intercept_only(Link::Logit).with_power(0, 1).with_power(0, 2),
            spurious: false,
        },
        PropensityVariant {
            name: "spurious_covariates",
            design: true_design().with_power(1, 1).with_interaction(0, 1),
            spurious: true,
        },
    ]
}

/// Scenario of the robustness study.
pub const MISSPEC_SCENARIO: Scenario = Scenario::M1H;

/// TIEE under each propensity variant on shared replicate data. The GPD
/// scale always uses only the real covariate.
pub fn misspec_study(regime: Regime, reps: usize, base_seed: u64, base: &McConfig) -> Result<Vec<(String, McResult)>> {
    let mut shared = base.clone();
    shared.scenario = MISSPEC_SCENARIO;
    shared.regime = regime;
    shared.reps = reps;
    shared.base_seed = base_seed;
    shared.methods = vec![Method::Tiee];
    shared.truth = Some(campaign_truth(&shared)?.0);
    let mut out = Vec::new();
    for v in propensity_variants() {
        let mut cfg = shared.clone();
        cfg.design = v.design;
        cfg.spurious = v.spurious;
        cfg.settings.tail_covariates = Some(vec![0]);
        let res = run_campaign(&cfg)?.results.remove(0);
        out.push((v.name.to_string(), res));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Pu,
    K,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pu => "pu",
            Self::K => "k",
        }
    }

    /// `p_u` in `0.85..=0.95` by 0.01, or `K` in `100..=2000` by 100.
    pub fn grid(self) -> Vec<f64> {
        match self {
            Self::Pu => (85..=95).map(|i| f64::from(i) / 100.0).collect(),
            Self::K => (1..=20).map(|i| f64::from(i * 100)).collect(),
        }
    }
}

impl FromStr for Sweep {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pu" | "p_u" => Ok(Self::Pu),
            "k" | "grid" => Ok(Self::K),
            _ => Err(Error::Usage(format!("unknown sweep `{s}` (expected pu or k)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub regime: Regime,
    pub value: f64,
    pub result: McResult,
}

/// TIEE MSE along `sweep` for each regime, every point on the same
/// replicate seeds.
pub fn sensitivity(sweep: Sweep, regimes: &[Regime], base: &McConfig) -> Result<Vec<SweepPoint>> {
    sensitivity_at(sweep, &sweep.grid(), regimes, base)
}

/// As [`sensitivity`] on a caller-chosen subset of sweep values.
pub fn sensitivity_at(sweep: Sweep, values: &[f64], regimes: &[Regime], base: &McConfig) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::new();
    for &regime in regimes {
        let mut cfg = base.clone();
        cfg.regime = regime;
        cfg.methods = vec![Method::Tiee];
        let (truth, _) = campaign_truth(&cfg)?;
        cfg.truth = Some(truth);
        for &value in values {
            let mut point = cfg.clone();
            match sweep {
                Sweep::Pu => point.settings.p_u = Some(value),
                Sweep::K => point.settings.grid_size = Some(value as usize),
            }
            let result = run_campaign(&point)?.results.remove(0);
            out.push(SweepPoint { regime, value, result });
        }
    }
    Ok(out)
}

pub fn sensitivity_pu(regimes: &[Regime], base: &McConfig) -> Result<Vec<SweepPoint>> {
    sensitivity(Sweep::Pu, regimes, base)
}

pub fn sensitivity_k(regimes: &[Regime], base: &McConfig) -> Result<Vec<SweepPoint>> {
    sensitivity(Sweep::K, regimes, base)
}

/// Runs `f` on a pool of at most `threads` workers (all cores when `None`).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t.max(1));
    }
    let pool = builder.build().map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
