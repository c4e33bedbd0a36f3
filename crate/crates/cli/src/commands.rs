use std::str::FromStr;

use tiee::baselines::{causal_hill, default_tail_fraction, pickands_quantile, zhang_firpo, BaselineResult, BootstrapConfig};
use tiee::evt::PickandsConfig;
use tiee::report::{campaign_header, campaign_rows, fmt_num, fmt_opt, sweep_rows, SWEEP_COLUMNS};
use tiee::simulation::{
    misspec_study, run_campaign, sensitivity as run_sweep, true_design, Campaign, EstimatorSettings, McConfig,
    McResult, Method, Regime, Scenario, Sweep, MISSPEC_SCENARIO,
};
use tiee::{estimate_eqte, fit_glm, load_csv, ColumnMap, Dataset, DesignSpec, Link, PropensityFit, TieeConfig};

use crate::output::{print_summary, write_manifest, write_table, Failure};
use crate::RunConfig;

pub const ESTIMATE_COLUMNS: [&str; 20] = [
    "method", "tau", "n", "alpha", "theta1", "theta0", "delta", "ci_lo", "ci_hi", "gamma1", "gamma0", "p_u", "k",
    "u1", "u0", "exceedances1", "exceedances0", "at_boundary", "propensity_converged", "error",
];

const SUMMARY_COLUMNS: [&str; 8] = ["label", "method", "regime", "truth", "bias", "mse", "coverage", "failed"];

fn parse<T: FromStr<Err = tiee::Error>>(s: &str) -> Result<T, Failure> {
    s.parse().map_err(Failure::from_core)
}

fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, Failure> {
    value.as_ref().ok_or_else(|| Failure::usage(format!("missing required flag --{flag}")))
}

fn methods(cfg: &RunConfig) -> Result<Vec<Method>, Failure> {
    if cfg.args.method.is_empty() {
        return Ok(vec![Method::Tiee]);
    }
    let mut out: Vec<Method> = Vec::new();
    for m in &cfg.args.method {
        let m = parse(m)?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

fn regimes(cfg: &RunConfig) -> Result<Vec<Regime>, Failure> {
    match &cfg.args.regime {
        Some(r) => Ok(vec![parse(r)?]),
        None => Ok(Regime::ALL.to_vec()),
    }
}

fn check_levels(cfg: &RunConfig) -> Result<(), Failure> {
    let a = &cfg.args;
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(Failure::usage(format!("--alpha {} outside (0, 1)", a.alpha)));
    }
    if let Some(p) = a.pu {
        if !(p > 0.0 && p < 1.0) {
            return Err(Failure::usage(format!("--pu {p} outside (0, 1)")));
        }
    }
    if a.grid_k == Some(0) {
        return Err(Failure::usage("--grid-k must be positive"));
    }
    Ok(())
}

fn settings(cfg: &RunConfig) -> EstimatorSettings {
    EstimatorSettings {
        p_u: cfg.args.pu,
        grid_size: cfg.args.grid_k,
        alpha: cfg.args.alpha,
        tail_covariates: None,
        bootstrap_resamples: cfg.args.bootstrap,
    }
}

/// `--link`/`--basis` over the named covariates; the default basis is
/// an intercept plus each covariate.
fn design(cfg: &RunConfig, names: &[String], default_link: Link) -> Result<Option<DesignSpec>, Failure> {
    let a = &cfg.args;
    if a.link.is_none() && a.basis.is_none() {
        return Ok(None);
    }
    let link = match &a.link {
        Some(l) => parse(l)?,
        None => default_link,
    };
    let basis = a.basis.clone().unwrap_or_else(|| std::iter::once("1".to_string()).chain(names.iter().cloned()).collect::<Vec<_>>().join(","));
    DesignSpec::parse_basis(&basis, names, link).map(Some).map_err(Failure::from_core)
}

pub fn estimate(cfg: &RunConfig) -> Result<(), Failure> {
    let a = &cfg.args;
    let input = require(&a.input, "input")?;
    let y = require(&a.y, "y")?;
    let d = require(&a.d, "d")?;
    let tau = *require(&a.tau, "tau")?;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Failure::usage(format!("--tau {tau} outside (0, 1)")));
    }
    check_levels(cfg)?;
    let methods = methods(cfg)?;
    let xs: Vec<&str> = a.x.iter().map(String::as_str).collect();
    let ds = load_csv(input, &ColumnMap::new(y.as_str(), d.as_str(), &xs)).map_err(Failure::input)?;
    let spec = match design(cfg, &a.x, Link::Logit)? {
        Some(s) => s,
        None => {
            let mut s = DesignSpec::intercept_only(Link::Logit);
            for j in 0..ds.cov_dim() {
                s = s.with_power(j, 1);
            }
            s
        }
    };
    let fit = fit_glm(&ds, &spec).map_err(Failure::from_core)?;

    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (i, &m) in methods.iter().enumerate() {
        let row = match estimate_row(m, &ds, &fit, tau, cfg, i as u64) {
            Ok(row) => row,
            Err(e) => {
                let mut row = vec![String::new(); ESTIMATE_COLUMNS.len()];
                row[0] = m.name().into();
                row[1] = fmt_num(tau);
                row[2] = ds.n().to_string();
                row[3] = fmt_num(a.alpha);
                row[18] = fit.converged.to_string();
                row[19] = format!("{}: {e}", e.kind());
                errors.push(e);
                row
            }
        };
        rows.push(row);
    }
    let path = write_table(&a.out, "estimate", a.format, cfg, &ESTIMATE_COLUMNS, &rows)?;
    let extra = serde_json::json!({
        "n": ds.n(),
        "treated": ds.arm_size(1),
        "propensity": { "coefficients": fit.coefficients, "converged": fit.converged, "iterations": fit.iterations },
        "methods": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
    });
    write_manifest(&a.out, cfg, &[path], extra)?;
    let shown: Vec<Vec<String>> = rows.iter().map(|r| [0, 4, 5, 6, 7, 8, 19].iter().map(|&i| r[i].clone()).collect()).collect();
    print_summary(&["method", "theta1", "theta0", "delta", "ci_lo", "ci_hi", "error"], &shown);
    if errors.len() == methods.len() {
        let first = errors.remove(0);
        let mut f = Failure::from_core(first);
        f.code = crate::output::EXIT_ESTIMATION;
        return Err(f);
    }
    Ok(())
}

fn estimate_row(
    method: Method,
    ds: &Dataset,
    fit: &PropensityFit,
    tau: f64,
    cfg: &RunConfig,
    index: u64,
) -> tiee::Result<Vec<String>> {
    let a = &cfg.args;
    let lead = vec![method.name().to_string(), fmt_num(tau), ds.n().to_string(), fmt_num(a.alpha)];
    let converged = fit.converged.to_string();
    if method == Method::Tiee {
        let mut tc = TieeConfig::new(tau);
        tc.p_u = a.pu;
        tc.grid_size = a.grid_k;
        tc.alpha = a.alpha;
        let r = estimate_eqte(ds, fit, &tc)?;
        let e = &r.eqte;
        let mut row = lead;
        row.extend([fmt_num(e.theta1), fmt_num(e.theta0), fmt_num(e.delta)]);
        row.extend([fmt_opt(e.ci.map(|c| c.0)), fmt_opt(e.ci.map(|c| c.1))]);
        row.extend([fmt_num(r.arm1.xi), fmt_num(r.arm0.xi), fmt_num(r.arm1.p_u), r.arm1.grid_size.to_string()]);
        row.extend([fmt_num(r.arm1.u), fmt_num(r.arm0.u)]);
        row.extend([r.arm1.n_exceedances.to_string(), r.arm0.n_exceedances.to_string()]);
        row.extend(["false".to_string(), converged, e.ci_error.clone().unwrap_or_default()]);
        return Ok(row);
    }
    let t = default_tail_fraction(ds.n());
    let b: BaselineResult = match method {
        Method::ZhangFirpo => {
            let boot = (a.bootstrap > 0).then(|| BootstrapConfig {
                resamples: a.bootstrap,
                alpha: a.alpha,
                seed: tiee::simulation::derive_seed(a.seed.unwrap_or(0), 1 + index),
            });
            zhang_firpo(ds, fit, tau, boot.as_ref())?
        }
        Method::CausalHill => causal_hill(ds, fit, tau, t, a.alpha)?,
        Method::Pickands => pickands_quantile(ds, fit, tau, t, &PickandsConfig::default())?,
        Method::Tiee => unreachable!(),
    };
    let mut row = lead;
    row.extend([fmt_num(b.theta1), fmt_num(b.theta0), fmt_num(b.delta)]);
    row.extend([fmt_opt(b.ci.map(|c| c.0)), fmt_opt(b.ci.map(|c| c.1))]);
    row.extend([fmt_opt(b.gamma.map(|g| g.0)), fmt_opt(b.gamma.map(|g| g.1))]);
    row.extend(std::iter::repeat_n(String::new(), 6));
    row.extend([b.at_boundary.to_string(), converged, String::new()]);
    Ok(row)
}

fn summary_row(label: &str, r: &McResult) -> Vec<String> {
    vec![
        label.to_string(),
        r.method.name().into(),
        r.regime.name().into(),
        fmt_num(r.truth),
        fmt_num(r.bias),
        fmt_num(r.mse),
        fmt_opt(r.coverage),
        r.n_failed().to_string(),
    ]
}

fn base_config(cfg: &RunConfig, scenario: Scenario, regime: Regime, seed: u64) -> Result<McConfig, Failure> {
    let a = &cfg.args;
    if a.reps == 0 {
        return Err(Failure::usage("--reps must be at least 1"));
    }
    let mut mc = McConfig::new(scenario, regime, a.reps, seed);
    mc.n = a.n;
    mc.settings = settings(cfg);
    mc.oracle_draws = a.oracle_draws;
    Ok(mc)
}

pub fn simulate(cfg: &RunConfig) -> Result<(), Failure> {
    let a = &cfg.args;
    let seed = *require(&a.seed, "seed")?;
    check_levels(cfg)?;
    let regimes = regimes(cfg)?;
    let misspec = match a.study.as_deref() {
        None => false,
        Some("misspec") => true,
        Some(other) => return Err(Failure::usage(format!("unknown study `{other}` (expected misspec)"))),
    };

    let mut labelled: Vec<(String, McResult)> = Vec::new();
    let mut runs = Vec::new();
    if misspec {
        for &regime in &regimes {
            let base = base_config(cfg, MISSPEC_SCENARIO, regime, seed)?;
            let rows = misspec_study(regime, a.reps, seed, &base).map_err(Failure::from_core)?;
            runs.push(serde_json::json!({ "regime": regime.name(), "tau": base.tau(), "truth": rows[0].1.truth }));
            labelled.extend(rows);
        }
    } else {
        let scenario: Scenario = parse(require(&a.scenario, "scenario")?)?;
        let methods = methods(cfg)?;
        let names = if a.link.is_some() || a.basis.is_some() { vec!["x".to_string()] } else { Vec::new() };
        let design = design(cfg, &names, Link::Identity)?.unwrap_or_else(true_design);
        for &regime in &regimes {
            let mut mc = base_config(cfg, scenario, regime, seed)?;
            mc.methods = methods.clone();
            mc.design = design.clone();
            let c: Campaign = run_campaign(&mc).map_err(Failure::from_core)?;
            runs.push(serde_json::json!({
                "regime": regime.name(),
                "tau": mc.tau(),
                "truth": c.truth,
                "oracle": c.oracle,
                "seeds": c.results[0].replicates.iter().map(|r| r.seed).collect::<Vec<_>>(),
            }));
            labelled.extend(c.results.into_iter().map(|r| (scenario.name().to_string(), r)));
        }
    }

    let refs: Vec<(String, &McResult)> = labelled.iter().map(|(l, r)| (l.clone(), r)).collect();
    let rows: Vec<Vec<String>> = refs.iter().flat_map(|(l, r)| campaign_rows(r, l)).collect();
    let path = write_table(&a.out, "simulate", a.format, cfg, &campaign_header(), &rows)?;
    write_manifest(&a.out, cfg, &[path], serde_json::json!({ "campaigns": runs }))?;
    let summary: Vec<Vec<String>> = labelled.iter().map(|(l, r)| summary_row(l, r)).collect();
    print_summary(&SUMMARY_COLUMNS, &summary);
    Ok(())
}

pub fn sensitivity(cfg: &RunConfig) -> Result<(), Failure> {
    let a = &cfg.args;
    let seed = *require(&a.seed, "seed")?;
    let sweep: Sweep = parse(require(&a.sweep, "sweep")?)?;
    check_levels(cfg)?;
    let regimes = regimes(cfg)?;
    let scenario: Scenario = match &a.scenario {
        Some(s) => parse(s)?,
        None => MISSPEC_SCENARIO,
    };
    let base = base_config(cfg, scenario, regimes[0], seed)?;
    let points = run_sweep(sweep, &regimes, &base).map_err(Failure::from_core)?;
    let rows = sweep_rows(sweep.name(), &points);
    let path = write_table(&a.out, "sensitivity", a.format, cfg, &SWEEP_COLUMNS, &rows)?;
    let truths: Vec<serde_json::Value> = regimes
        .iter()
        .filter_map(|&r| points.iter().find(|p| p.regime == r))
        .map(|p| serde_json::json!({ "regime": p.regime.name(), "tau": p.result.tau, "truth": p.result.truth }))
        .collect();
    write_manifest(&a.out, cfg, &[path], serde_json::json!({ "scenario": scenario.name(), "truths": truths }))?;
    print_summary(&SWEEP_COLUMNS, &rows);
    Ok(())
}
