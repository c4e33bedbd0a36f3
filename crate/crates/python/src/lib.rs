//! Python bindings for the TIEE estimators.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tiee::baselines::{causal_hill, default_tail_fraction, pickands_quantile, zhang_firpo, BaselineResult, BootstrapConfig};
use tiee::evt::{gpd_cdf, gpd_quantile, GpdTail, PickandsConfig};
use tiee::simulation::{self as sim, EstimatorSettings, McConfig, Method, Regime, Scenario};
use tiee::{ColumnMap, DesignSpec, Link, TieeConfig, WeightedSample};

fn to_py(e: tiee::Error) -> PyErr {
    if e.is_input_error() || matches!(e, tiee::Error::Domain(_)) {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(format!("{}: {e}", e.kind()))
    }
}

fn parse<T: std::str::FromStr<Err = tiee::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

/// Outcomes, binary treatments and covariate columns.
#[pyclass(name = "Dataset", module = "tiee_py", frozen)]
struct PyDataset {
    inner: tiee::Dataset,
    names: Vec<String>,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (y, d, x=None, names=None))]
    fn new(y: Vec<f64>, d: Vec<u8>, x: Option<Vec<Vec<f64>>>, names: Option<Vec<String>>) -> PyResult<Self> {
        let x = x.unwrap_or_default();
        let inner = tiee::Dataset::from_columns(&y, &d, &x).map_err(to_py)?;
        let names = names.unwrap_or_else(|| (0..inner.cov_dim()).map(|j| format!("x{}", j + 1)).collect());
        if names.len() != inner.cov_dim() {
            return Err(PyValueError::new_err("names must match the number of covariates"));
        }
        Ok(Self { inner, names })
    }

    #[staticmethod]
    #[pyo3(signature = (path, y, d, x=Vec::new()))]
    fn from_csv(path: &str, y: &str, d: &str, x: Vec<String>) -> PyResult<Self> {
        let xs: Vec<&str> = x.iter().map(String::as_str).collect();
        let inner = tiee::load_csv(path, &ColumnMap::new(y, d, &xs)).map_err(to_py)?;
        Ok(Self { inner, names: x })
    }

    /// Draws a dataset from a simulation scenario (`M1H` ... `M3L`).
    #[staticmethod]
    #[pyo3(signature = (scenario, n, seed))]
    fn simulate(scenario: &str, n: usize, seed: u64) -> PyResult<Self> {
        let (inner, _) = sim::generate(&sim::DgpSpec::new(parse(scenario)?, n, seed)).map_err(to_py)?;
        Ok(Self { inner, names: vec!["x".into()] })
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.outcomes().collect()
    }

    #[getter]
    fn d(&self) -> Vec<u8> {
        self.inner.treatments().collect()
    }

    #[getter]
    fn x(&self) -> Vec<Vec<f64>> {
        (0..self.inner.cov_dim()).map(|j| self.inner.observations().iter().map(|o| o.x[j]).collect()).collect()
    }

    #[getter]
    fn names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, treated={}, covariates={:?})", self.inner.n(), self.inner.arm_size(1), self.names)
    }
}

/// Fitted propensity model.
#[pyclass(name = "PropensityFit", module = "tiee_py", frozen)]
struct PyPropensity {
    inner: tiee::PropensityFit,
}

#[pymethods]
impl PyPropensity {
    #[getter]
    fn coefficients(&self) -> Vec<f64> {
        self.inner.coefficients.clone()
    }

    #[getter]
    fn probabilities(&self) -> Vec<f64> {
        self.inner.probabilities.clone()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }
}

fn design(ds: &PyDataset, link: &str, basis: Option<&str>) -> PyResult<DesignSpec> {
    let link: Link = parse(link)?;
    match basis {
        Some(b) => DesignSpec::parse_basis(b, &ds.names, link).map_err(to_py),
        None => Ok((0..ds.inner.cov_dim()).fold(DesignSpec::intercept_only(link), |s, j| s.with_power(j, 1))),
    }
}

/// Propensity model on `dataset`; `basis` like `"1,x,x^2"` over covariate names.
#[pyfunction]
#[pyo3(signature = (dataset, link="logit", basis=None))]
fn fit_propensity(dataset: &PyDataset, link: &str, basis: Option<&str>) -> PyResult<PyPropensity> {
    let spec = design(dataset, link, basis)?;
    Ok(PyPropensity { inner: tiee::fit_glm(&dataset.inner, &spec).map_err(to_py)? })
}

/// Effect estimate with per-arm diagnostics.
#[pyclass(name = "EqteResult", module = "tiee_py", frozen, get_all)]
struct PyEqte {
    tau: f64,
    theta1: f64,
    theta0: f64,
    delta: f64,
    ci: Option<(f64, f64)>,
    variance: Option<f64>,
    alpha: f64,
    xi: (f64, f64),
    threshold: (f64, f64),
    p_u: f64,
    grid_size: usize,
    exceedances: (usize, usize),
}

#[pymethods]
impl PyEqte {
    fn __repr__(&self) -> String {
        match self.ci {
            Some((lo, hi)) => format!("EqteResult(tau={}, delta={}, ci=({lo}, {hi}))", self.tau, self.delta),
            None => format!("EqteResult(tau={}, delta={}, ci=None)", self.tau, self.delta),
        }
    }
}

/// TIEE estimate of the quantile treatment effect at `tau`.
#[pyfunction]
#[pyo3(signature = (dataset, tau, propensity=None, p_u=None, grid_size=None, alpha=0.10))]
fn estimate_eqte(
    dataset: &PyDataset,
    tau: f64,
    propensity: Option<&PyPropensity>,
    p_u: Option<f64>,
    grid_size: Option<usize>,
    alpha: f64,
) -> PyResult<PyEqte> {
    let owned;
    let fit = match propensity {
        Some(p) => &p.inner,
        None => {
            owned = tiee::fit_glm(&dataset.inner, &design(dataset, "logit", None)?).map_err(to_py)?;
            &owned
        }
    };
    let mut cfg = TieeConfig::new(tau);
    cfg.p_u = p_u;
    cfg.grid_size = grid_size;
    cfg.alpha = alpha;
    let r = tiee::estimate_eqte(&dataset.inner, fit, &cfg).map_err(to_py)?;
    Ok(PyEqte {
        tau,
        theta1: r.eqte.theta1,
        theta0: r.eqte.theta0,
        delta: r.eqte.delta,
        ci: r.eqte.ci,
        variance: r.eqte.sigma_delta_sq,
        alpha,
        xi: (r.arm1.xi, r.arm0.xi),
        threshold: (r.arm1.u, r.arm0.u),
        p_u: r.arm1.p_u,
        grid_size: r.arm1.grid_size,
        exceedances: (r.arm1.n_exceedances, r.arm0.n_exceedances),
    })
}

fn baseline_dict<'py>(py: Python<'py>, r: &BaselineResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("theta1", r.theta1)?;
    d.set_item("theta0", r.theta0)?;
    d.set_item("delta", r.delta)?;
    d.set_item("ci", r.ci)?;
    d.set_item("gamma", r.gamma)?;
    d.set_item("at_boundary", r.at_boundary)?;
    Ok(d)
}

/// Baseline estimator by name: `zhang_firpo`, `causal_hill` or `pickands`.
#[pyfunction]
#[pyo3(signature = (method, dataset, propensity, tau, alpha=0.10, bootstrap=0, seed=0))]
fn baseline<'py>(
    py: Python<'py>,
    method: &str,
    dataset: &PyDataset,
    propensity: &PyPropensity,
    tau: f64,
    alpha: f64,
    bootstrap: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let (ds, fit) = (&dataset.inner, &propensity.inner);
    let t = default_tail_fraction(ds.n());
    let r = match parse::<Method>(method)? {
        Method::ZhangFirpo => {
            let boot = (bootstrap > 0).then_some(BootstrapConfig { resamples: bootstrap, alpha, seed });
            zhang_firpo(ds, fit, tau, boot.as_ref())
        }
        Method::CausalHill => causal_hill(ds, fit, tau, t, alpha),
        Method::Pickands => pickands_quantile(ds, fit, tau, t, &PickandsConfig::default()),
        Method::Tiee => return Err(PyValueError::new_err("use estimate_eqte for tiee")),
    }
    .map_err(to_py)?;
    baseline_dict(py, &r)
}

/// Monte Carlo truth of a scenario's effect at `tau`.
#[pyfunction]
#[pyo3(signature = (scenario, tau, n_mc=sim::DEFAULT_ORACLE_DRAWS, seed=0))]
fn oracle(py: Python<'_>, scenario: &str, tau: f64, n_mc: usize, seed: u64) -> PyResult<(f64, f64)> {
    let scenario: Scenario = parse(scenario)?;
    let o = py.detach(|| sim::true_eqte_oracle(scenario, tau, n_mc, seed)).map_err(to_py)?;
    Ok((o.delta, o.se))
}

/// Replicated campaign; returns one summary dict per method.
#[pyfunction]
#[pyo3(signature = (scenario, regime, reps, seed, methods=vec!["tiee".to_string()], n=1000, truth=None, bootstrap=0))]
#[allow(clippy::too_many_arguments)]
fn run_mc<'py>(
    py: Python<'py>,
    scenario: &str,
    regime: &str,
    reps: usize,
    seed: u64,
    methods: Vec<String>,
    n: usize,
    truth: Option<f64>,
    bootstrap: usize,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let regime: Regime = parse(regime)?;
    let mut cfg = McConfig::new(parse(scenario)?, regime, reps, seed);
    cfg.n = n;
    cfg.truth = truth;
    cfg.methods = methods.iter().map(|m| parse(m)).collect::<PyResult<_>>()?;
    cfg.settings = EstimatorSettings { bootstrap_resamples: bootstrap, ..Default::default() };
    let c = py.detach(|| sim::run_campaign(&cfg)).map_err(to_py)?;
    c.results
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("method", r.method.name())?;
            d.set_item("regime", r.regime.name())?;
            d.set_item("tau", r.tau)?;
            d.set_item("truth", r.truth)?;
            d.set_item("bias", r.bias)?;
            d.set_item("mse", r.mse)?;
            d.set_item("coverage", r.coverage)?;
            d.set_item("failed", r.n_failed())?;
            d.set_item("deltas", r.replicates.iter().filter_map(|x| x.outcome.as_ref().ok().map(|e| e.delta)).collect::<Vec<_>>())?;
            Ok(d)
        })
        .collect()
}

/// Left-continuous weighted quantile.
#[pyfunction]
#[pyo3(signature = (values, p, weights=None))]
fn weighted_quantile(values: Vec<f64>, p: f64, weights: Option<Vec<f64>>) -> PyResult<f64> {
    let s = match weights {
        Some(w) => WeightedSample::new(values, w),
        None => WeightedSample::unweighted(values),
    }
    .map_err(to_py)?;
    tiee::weighted_quantile(&s, p).map_err(to_py)
}

/// Quantile of the spliced GPD tail above `u` at level `p >= p_u`.
#[pyfunction]
fn gpd_tail_quantile(u: f64, p_u: f64, sigma: f64, xi: f64, p: f64) -> PyResult<f64> {
    gpd_quantile(&GpdTail::new(u, p_u, sigma, xi).map_err(to_py)?, p).map_err(to_py)
}

#[pyfunction]
fn gpd_tail_cdf(u: f64, p_u: f64, sigma: f64, xi: f64, y: f64) -> PyResult<f64> {
    gpd_cdf(&GpdTail::new(u, p_u, sigma, xi).map_err(to_py)?, y).map_err(to_py)
}

#[pymodule]
fn tiee_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPropensity>()?;
    m.add_class::<PyEqte>()?;
    m.add_function(wrap_pyfunction!(fit_propensity, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_eqte, m)?)?;
    m.add_function(wrap_pyfunction!(baseline, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add_function(wrap_pyfunction!(run_mc, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(gpd_tail_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(gpd_tail_cdf, m)?)?;
    Ok(())
}
