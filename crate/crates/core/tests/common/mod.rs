#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use tiee::evt::{fit_gpd, fit_gpd_covariate, gpd_cdf, gpd_quantile, GpdTail};
use tiee::inference::{sandwich_variance, signal_mass, SandwichParts};
use tiee::propensity::{fit_glm, DesignSpec, Link};
use tiee::simulation::dgp::{generate, DgpSpec, Scenario};
use tiee::simulation::rng::{open_uniform, stream_rng};
use tiee::tiee::{reconstruct_quantile, solve_tiee, Grid, ReconstructedQuantile, TailMode};
use tiee::{weighted_quantile, Dataset, Observation, WeightedSample};

pub type Check = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn gpd_xi_continuity() -> Check {
    for sigma in [0.5, 1.0, 3.0] {
        let exp_tail = GpdTail::new(2.0, 0.9, sigma, 0.0).unwrap();
        for tau in [0.95, 0.99, 0.999] {
            let q0 = gpd_quantile(&exp_tail, tau).unwrap();
            for xi in [-2e-8, -1e-9, 1e-9, 2e-8] {
                let t = GpdTail::new(2.0, 0.9, sigma, xi).unwrap();
                let q = gpd_quantile(&t, tau).unwrap();
                ensure((q - q0).abs() < 1e-6 * sigma, || format!("xi={xi} tau={tau}: {q} vs {q0}"))?;
            }
        }
    }
    Ok(())
}

pub fn gpd_round_trip() -> Check {
    for xi in [-0.5, -0.1, 0.0, 0.3, 1.0, 2.5] {
        let t = GpdTail::new(10.0, 0.9, 2.0, xi).unwrap();
        for tau in [0.95, 0.99, 0.999, 0.9999] {
            let y = gpd_quantile(&t, tau).unwrap();
            let back = gpd_cdf(&t, y).unwrap();
            ensure((back - tau).abs() < 1e-10, || format!("xi={xi} tau={tau}: {back}"))?;
        }
    }
    Ok(())
}

/// Reconstructions from simulated arms; `S_n` checked on random sorted probes.
pub fn signal_monotone(cases: usize) -> Check {
    let mut rng = stream_rng(17, 0);
    for c in 0..cases {
        let scenario = Scenario::ALL[c % 6];
        let (ds, _) = generate(&DgpSpec::new(scenario, 400 + 50 * (c % 5), 100 + c as u64)).map_err(|e| e.to_string())?;
        let fit = fit_glm(&ds, &DesignSpec::intercept_only(Link::Identity).with_power(0, 2)).map_err(|e| e.to_string())?;
        let w = tiee::propensity::arm_weights(&fit, &ds, (c % 2) as u8).map_err(|e| e.to_string())?;
        let mode = if c % 3 == 0 { TailMode::Constant } else { TailMode::Covariate };
        let recon = reconstruct_quantile(&ds, &w, 0.9, mode, &[0]).map_err(|e| e.to_string())?;
        let tau = 0.99 + 0.009 * open_uniform(&mut rng);
        let grid = Grid::tail_calibrated(300, 0.9, tau).map_err(|e| e.to_string())?;
        let atoms = recon.atoms(&grid).map_err(|e| e.to_string())?;
        let lo = atoms.values()[0] - 1.0;
        let hi = atoms.max() + 1.0;
        let mut probes: Vec<f64> = (0..200).map(|_| lo + (hi - lo) * open_uniform(&mut rng)).collect();
        probes.extend(atoms.values().iter().step_by(7).copied());
        probes.sort_by(f64::total_cmp);
        let s: Vec<f64> = probes.iter().map(|&t| signal_mass(&atoms, t)).collect();
        for (i, pair) in s.windows(2).enumerate() {
            ensure(pair[1] >= pair[0], || format!("case {c}: S decreases at {}", probes[i + 1]))?;
        }
    }
    Ok(())
}

fn body_only(values: Vec<f64>, weights: Vec<f64>, p_u: f64) -> ReconstructedQuantile {
    let body = WeightedSample::new(values, weights).unwrap();
    let u = weighted_quantile(&body, p_u).unwrap();
    let tail = GpdTail::new(u, p_u, 1.0, 0.2).unwrap();
    ReconstructedQuantile::from_tail(Some(body), &tail).unwrap()
}

/// For every `n <= 50` and every grid level below `p_u`, the solver equals
/// the weighted empirical quantile.
pub fn body_equivalence() -> Check {
    let p_u = 0.9;
    let grid = Grid::tail_calibrated(200, p_u, 0.99).unwrap();
    let mut rng = stream_rng(23, 0);
    for n in 1..=50usize {
        for weighted in [false, true] {
            let values: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..(n as i32).max(2)))).collect();
            let weights: Vec<f64> = if weighted {
                (0..n).map(|_| 0.1 + 3.0 * open_uniform(&mut rng)).collect()
            } else {
                vec![1.0; n]
            };
            let recon = body_only(values.clone(), weights.clone(), p_u);
            let body = WeightedSample::new(values, weights).unwrap();
            for &tau in grid.levels().iter().filter(|&&p| p < p_u) {
                let got = solve_tiee(&recon, &grid, tau, None).map_err(|e| e.to_string())?.theta_hat;
                let want = weighted_quantile(&body, tau).unwrap();
                ensure(got == want, || format!("n={n} tau={tau}: {got} vs {want}"))?;
            }
        }
    }
    Ok(())
}

/// `theta_hat` unchanged when every weight is multiplied by a positive constant.
pub fn rescaling_invariance(cases: usize) -> Check {
    let mut rng = stream_rng(29, 0);
    for c in 0..cases {
        let n = 30 + c % 70;
        let values: Vec<f64> = (0..n).map(|_| -(open_uniform(&mut rng)).ln()).collect();
        let weights: Vec<f64> = (0..n).map(|_| 0.2 + open_uniform(&mut rng)).collect();
        let scale = 10f64.powf(-3.0 + 6.0 * open_uniform(&mut rng));
        let tau = 0.95 + 0.04 * open_uniform(&mut rng);
        let grid = Grid::tail_calibrated(400, 0.9, tau).unwrap();
        let a = body_only(values.clone(), weights.clone(), 0.9);
        let b = body_only(values, weights.iter().map(|w| w * scale).collect(), 0.9);
        let ta = solve_tiee(&a, &grid, tau, None).map_err(|e| e.to_string())?.theta_hat;
        let tb = solve_tiee(&b, &grid, tau, None).map_err(|e| e.to_string())?.theta_hat;
        ensure((ta - tb).abs() <= 1e-9 * ta.abs().max(1.0), || format!("case {c}: {ta} vs {tb} (scale {scale})"))?;
    }
    Ok(())
}

pub fn gpd_recovery() -> Check {
    let mut rng = stream_rng(31, 0);
    let exp: Vec<f64> = (0..50_000).map(|_| -(open_uniform(&mut rng)).ln()).collect();
    let f = fit_gpd(&WeightedSample::unweighted(exp).unwrap()).map_err(|e| e.to_string())?;
    ensure(f.xi.abs() <= 0.05 && (f.sigma - 1.0).abs() <= 0.05, || format!("exponential: sigma {} xi {}", f.sigma, f.xi))?;

    let mut pareto: Vec<f64> = (0..50_000).map(|_| open_uniform(&mut rng).powf(-0.5)).collect();
    pareto.sort_by(f64::total_cmp);
    let u = pareto[45_000 - 1];
    let exc: Vec<f64> = pareto.iter().filter(|&&y| y > u).map(|y| y - u).collect();
    let f = fit_gpd(&WeightedSample::unweighted(exc).unwrap()).map_err(|e| e.to_string())?;
    ensure((f.xi - 0.5).abs() <= 0.05, || format!("pareto: xi {}", f.xi))?;

    let (mut e, mut rows) = (Vec::new(), Vec::new());
    for _ in 0..100_000 {
        let x = 2.0 * open_uniform(&mut rng) - 1.0;
        let sigma = (0.5 + 0.3 * x).exp();
        let v = open_uniform(&mut rng);
        e.push(sigma / 0.2 * (v.powf(-0.2) - 1.0));
        rows.push(vec![x]);
    }
    let f = fit_gpd_covariate(&e, &vec![1.0; e.len()], &rows).map_err(|e| e.to_string())?;
    let b = &f.scale_coefs;
    ensure((b[0] - 0.5).abs() <= 0.05 && (b[1] - 0.3).abs() <= 0.05, || format!("covariate scale {b:?}"))?;
    ensure((f.xi - 0.2).abs() <= 0.05, || format!("covariate xi {}", f.xi))
}

pub fn glm_recovery() -> Check {
    let mut rng = stream_rng(37, 0);
    let obs: Vec<Observation> = (0..50_000)
        .map(|_| {
            let x = 2.0 * open_uniform(&mut rng) - 1.0;
            let p = 1.0 / (1.0 + (-(0.3 + 1.2 * x)).exp());
            Observation { y: 0.0, d: u8::from(open_uniform(&mut rng) < p), x: vec![x] }
        })
        .collect();
    let ds = Dataset::new(obs).unwrap();
    let fit = fit_glm(&ds, &DesignSpec::intercept_only(Link::Logit).with_power(0, 1)).map_err(|e| e.to_string())?;
    let c = &fit.coefficients;
    ensure((c[0] - 0.3).abs() <= 0.05 && (c[1] - 1.2).abs() <= 0.05, || format!("logit {c:?}"))?;

    let (ds, _) = generate(&DgpSpec::new(Scenario::M1L, 50_000, 41)).map_err(|e| e.to_string())?;
    let fit = fit_glm(&ds, &DesignSpec::intercept_only(Link::Identity).with_power(0, 2)).map_err(|e| e.to_string())?;
    let c = &fit.coefficients;
    ensure((c[0] - 0.25).abs() <= 0.02 && (c[1] - 0.5).abs() <= 0.02, || format!("identity {c:?}"))
}

fn random_parts(rng: &mut impl rand::RngCore, k: usize) -> SandwichParts {
    let mut draw = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| 2.0 * open_uniform(rng) - 1.0);
    let m = draw(k, k) + DMatrix::identity(k, k) * 3.0;
    let l = draw(k, k);
    let sigma_psi = &l * l.transpose() + DMatrix::identity(k, k) * 0.1;
    let a = DVector::from_column_slice(draw(k, 1).as_slice());
    let s = DVector::from_column_slice(draw(k, 1).as_slice());
    SandwichParts { a_zeta: a, m, sigma_psi, sigma_g_psi: s }
}

/// Orthogonality (`A = 0`) and uncorrelatedness (`Sigma_{g,psi} = 0`) reductions.
pub fn sandwich_cases() -> Check {
    let mut rng = stream_rng(43, 0);
    for k in 1..=4 {
        let (sigma_sq, phi) = (0.3 + open_uniform(&mut rng), 0.2 + open_uniform(&mut rng));
        let mut p = random_parts(&mut rng, k);
        p.a_zeta = DVector::zeros(k);
        let v = sandwich_variance(sigma_sq, phi, &p).map_err(|e| e.to_string())?;
        ensure(v == sigma_sq / (phi * phi), || format!("case 1, k={k}: {v}"))?;

        let mut p = random_parts(&mut rng, k);
        p.sigma_g_psi = DVector::zeros(k);
        let mi = p.m.clone().try_inverse().unwrap();
        let v_zeta = &mi * &p.sigma_psi * mi.transpose();
        let want = (sigma_sq + (p.a_zeta.transpose() * v_zeta * &p.a_zeta)[(0, 0)]) / (phi * phi);
        let v = sandwich_variance(sigma_sq, phi, &p).map_err(|e| e.to_string())?;
        ensure((v - want).abs() <= 1e-12 * want.abs().max(1.0), || format!("case 2, k={k}: {v} vs {want}"))?;
    }
    Ok(())
}

/// Invertible linear reparameterization `zeta = T eta` leaves `V` unchanged.
pub fn sandwich_reparameterization(cases: usize) -> Check {
    let mut rng = stream_rng(47, 0);
    for c in 0..cases {
        let k = 1 + c % 4;
        let p = random_parts(&mut rng, k);
        let t = DMatrix::from_fn(k, k, |_, _| 2.0 * open_uniform(&mut rng) - 1.0) + DMatrix::identity(k, k) * 2.0;
        let tt = t.transpose();
        let q = SandwichParts {
            a_zeta: &tt * &p.a_zeta,
            m: &tt * &p.m * &t,
            sigma_psi: &tt * &p.sigma_psi * &t,
            sigma_g_psi: &tt * &p.sigma_g_psi,
        };
        let a = sandwich_variance(0.7, 0.4, &p).map_err(|e| e.to_string())?;
        let b = sandwich_variance(0.7, 0.4, &q).map_err(|e| e.to_string())?;
        ensure((a - b).abs() <= 1e-8 * a.abs().max(1.0), || format!("case {c}: {a} vs {b}"))?;
    }
    Ok(())
}

/// Runs named checks, returning the failures.
pub fn run_all(checks: &[(&str, fn() -> Check)]) -> Vec<String> {
    checks
        .iter()
        .filter_map(|(name, f)| f().err().map(|e| format!("{name}: {e}")))
        .collect()
}
