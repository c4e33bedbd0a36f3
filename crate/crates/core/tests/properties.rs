mod common;

use proptest::prelude::*;
use tiee::evt::{gpd_cdf, gpd_quantile, GpdTail};
use tiee::inference::{
    confidence_interval, eqte_variance, kde_density, moment_covariance, moment_variance, normal_quantile,
    phi_derivative, signal_mass, PhiMethod, VarianceComponents,
};
use tiee::propensity::{fit_glm, ipw_weights, DesignSpec, Link, PropensityFit};
use tiee::tiee::{solve_tiee, Grid, ReconstructedQuantile};
use tiee::{weighted_quantile, Dataset, Observation, WeightedSample};

fn sample_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..60).prop_flat_map(|n| (prop::collection::vec(-50.0f64..50.0, n), prop::collection::vec(0.01f64..5.0, n)))
}

proptest! {
    #[test]
    fn weighted_quantile_is_a_sample_value((v, w) in sample_strategy(), p in 0.001f64..0.999) {
        let s = WeightedSample::new(v.clone(), w).unwrap();
        let q = weighted_quantile(&s, p).unwrap();
        prop_assert!(v.contains(&q));
    }

    #[test]
    fn weighted_quantile_monotone_in_level((v, w) in sample_strategy(), a in 0.001f64..0.999, b in 0.001f64..0.999) {
        let s = WeightedSample::new(v, w).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(weighted_quantile(&s, lo).unwrap() <= weighted_quantile(&s, hi).unwrap());
    }

    #[test]
    fn weighted_quantile_reaches_level((v, w) in sample_strategy(), p in 0.001f64..0.999) {
        let s = WeightedSample::new(v, w).unwrap();
        let q = weighted_quantile(&s, p).unwrap();
        prop_assert!(s.cdf(q) >= p * (1.0 - 1e-12));
        let below = s.values().iter().zip(s.weights()).filter(|(x, _)| **x < q).map(|(_, w)| w).sum::<f64>();
        prop_assert!(below / s.total_weight() < p);
    }

    #[test]
    fn unit_weights_give_order_statistic(v in prop::collection::vec(-10.0f64..10.0, 1..50), p in 0.001f64..0.999) {
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        let k = ((p * v.len() as f64) * (1.0 - 1e-12)).ceil() as usize;
        let q = weighted_quantile(&WeightedSample::unweighted(v).unwrap(), p).unwrap();
        prop_assert_eq!(q, sorted[k.max(1) - 1]);
    }

    #[test]
    fn gpd_cdf_inverts_quantile(
        u in -10.0f64..10.0, p_u in 0.5f64..0.99, sigma in 0.01f64..20.0, xi in -0.8f64..3.0, r in 0.0f64..1.0
    ) {
        let tail = GpdTail::new(u, p_u, sigma, xi).unwrap();
        let tau = p_u + (1.0 - p_u) * (0.001 + 0.998 * r);
        let y = gpd_quantile(&tail, tau).unwrap();
        prop_assert!((gpd_cdf(&tail, y).unwrap() - tau).abs() < 1e-10);
    }

    #[test]
    fn gpd_quantile_increasing(p_u in 0.5f64..0.99, sigma in 0.01f64..20.0, xi in -0.8f64..3.0, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let tail = GpdTail::new(0.0, p_u, sigma, xi).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let t = |r: f64| p_u + (1.0 - p_u) * (0.001 + 0.998 * r);
        prop_assert!(gpd_quantile(&tail, t(lo)).unwrap() <= gpd_quantile(&tail, t(hi)).unwrap());
    }

    #[test]
    fn signal_monotone_on_reconstruction(
        (v, w) in sample_strategy(), sigma in 0.1f64..5.0, xi in -0.5f64..1.5, t in prop::collection::vec(-60.0f64..200.0, 2..30)
    ) {
        let body = WeightedSample::new(v, w).unwrap();
        let u = weighted_quantile(&body, 0.9).unwrap();
        let recon = ReconstructedQuantile::from_tail(Some(body), &GpdTail::new(u, 0.9, sigma, xi).unwrap()).unwrap();
        let atoms = recon.atoms(&Grid::tail_calibrated(200, 0.9, 0.99).unwrap()).unwrap();
        let mut t = t;
        t.sort_by(f64::total_cmp);
        let s: Vec<f64> = t.iter().map(|&x| signal_mass(&atoms, x)).collect();
        prop_assert!(s.windows(2).all(|p| p[0] <= p[1]));
        prop_assert!(s.iter().all(|&x| (0.0..=1.0 + 1e-12).contains(&x)));
    }

    #[test]
    fn theta_monotone_in_tau((v, w) in sample_strategy(), sigma in 0.1f64..5.0, xi in -0.5f64..1.0) {
        let body = WeightedSample::new(v, w).unwrap();
        let u = weighted_quantile(&body, 0.9).unwrap();
        let recon = ReconstructedQuantile::from_tail(Some(body), &GpdTail::new(u, 0.9, sigma, xi).unwrap()).unwrap();
        let grid = Grid::tail_calibrated(400, 0.9, 0.999).unwrap();
        let levels: Vec<f64> = grid.levels().iter().copied().filter(|&p| p > 0.5 && p < 0.999).step_by(10).collect();
        let th: Vec<f64> = levels.iter().map(|&tau| solve_tiee(&recon, &grid, tau, None).unwrap().theta_hat).collect();
        prop_assert!(th.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn theta_invariant_to_weight_scale((v, w) in sample_strategy(), c in 1e-3f64..1e3) {
        let mk = |w: Vec<f64>| {
            let body = WeightedSample::new(v.clone(), w).unwrap();
            let u = weighted_quantile(&body, 0.9).unwrap();
            ReconstructedQuantile::from_tail(Some(body), &GpdTail::new(u, 0.9, 1.0, 0.2).unwrap()).unwrap()
        };
        let grid = Grid::tail_calibrated(300, 0.9, 0.99).unwrap();
        let a = solve_tiee(&mk(w.clone()), &grid, 0.99, None).unwrap().theta_hat;
        let b = solve_tiee(&mk(w.iter().map(|x| x * c).collect()), &grid, 0.99, None).unwrap().theta_hat;
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn moment_covariance_bounded(g in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..100)) {
        let (a, b): (Vec<f64>, Vec<f64>) = g.into_iter().unzip();
        let c = moment_covariance(&a, &b).unwrap();
        let (va, vb) = (moment_variance(&a).unwrap(), moment_variance(&b).unwrap());
        prop_assert!(va >= 0.0 && vb >= 0.0);
        prop_assert!(c.abs() <= (va * vb).sqrt() * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn independent_arms_add(s11 in 0.0f64..10.0, s00 in 0.0f64..10.0, p1 in 0.01f64..5.0, p0 in 0.01f64..5.0) {
        let c = VarianceComponents { sigma11: s11, sigma00: s00, sigma10: 0.0, phi_prime1: p1, phi_prime0: p0 };
        let v = eqte_variance(&c).unwrap();
        prop_assert_eq!(v, s11 / (p1 * p1) + s00 / (p0 * p0));
    }

    #[test]
    fn kde_nonnegative((v, w) in sample_strategy(), t in -100.0f64..100.0) {
        let s = WeightedSample::new(v, w).unwrap();
        prop_assert!(kde_density(&s, t) >= 0.0);
    }

    #[test]
    fn interval_symmetric(d in -100.0f64..100.0, v in 0.0f64..100.0, n in 2usize..100000, alpha in 0.01f64..0.5) {
        let (lo, hi) = confidence_interval(d, v, n, alpha).unwrap();
        prop_assert!(lo <= hi);
        prop_assert!(((d - lo) - (hi - d)).abs() <= 1e-9 * (1.0 + d.abs()));
    }

    #[test]
    fn hajek_weights_average_one(p in prop::collection::vec(0.02f64..0.98, 4..80)) {
        let n = p.len();
        let obs: Vec<Observation> = (0..n).map(|i| Observation { y: i as f64, d: (i % 2) as u8, x: vec![] }).collect();
        let ds = Dataset::new(obs).unwrap();
        let mut fit = PropensityFit::constant(&ds, 0.5).unwrap();
        fit.probabilities = p;
        for d in [0u8, 1] {
            let s = ipw_weights(&fit, &ds, d).unwrap();
            prop_assert!((s.total_weight() / s.len() as f64 - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn glm_reparameterization_invariance() {
    let (ds, _) = tiee::simulation::generate(&tiee::simulation::DgpSpec::new(tiee::simulation::Scenario::M1L, 3000, 5)).unwrap();
    let shifted: Vec<Observation> =
        ds.observations().iter().map(|o| Observation { x: vec![2.5 * o.x[0] + 1.0], ..o.clone() }).collect();
    let ds2 = Dataset::new(shifted).unwrap();
    let spec = DesignSpec::intercept_only(Link::Logit).with_power(0, 1);
    let a = fit_glm(&ds, &spec).unwrap();
    let b = fit_glm(&ds2, &spec).unwrap();
    for (p, q) in a.probabilities.iter().zip(&b.probabilities) {
        assert!((p - q).abs() < 1e-8);
    }
    assert!(a.mean_score_norm() < 1e-8);
}

#[test]
fn clipping_bounds() {
    let obs: Vec<Observation> = (0..400)
        .map(|i| {
            let x = f64::from(i) / 400.0 * 8.0 - 4.0;
            Observation { y: 0.0, d: u8::from(x > 0.3 || i % 97 == 0), x: vec![x] }
        })
        .collect();
    let ds = Dataset::new(obs).unwrap();
    let fit = fit_glm(&ds, &DesignSpec::intercept_only(Link::Logit).with_power(0, 1)).unwrap();
    assert!(fit.probabilities.iter().all(|&p| (0.01..=0.99).contains(&p)));
}

#[test]
fn exponential_density_from_reconstruction() {
    let tail = GpdTail::new(0.0, 0.0, 1.0, 0.0).unwrap();
    let recon = ReconstructedQuantile::from_tail(None, &tail).unwrap();
    let grid = Grid::uniform(2000).unwrap();
    let sol = solve_tiee(&recon, &grid, 0.99, None).unwrap();
    let f = phi_derivative(&sol.atoms, sol.theta_hat, PhiMethod::FiniteDifference).unwrap();
    assert!((f - 0.01).abs() <= 0.15 * 0.01, "{f}");
}

#[test]
fn linear_signal_slope() {
    let atoms = WeightedSample::new((0..2001).map(|i| f64::from(i) * 0.001).collect(), vec![0.0005; 2001]).unwrap();
    let f = tiee::inference::finite_difference(|t| 0.5 * t, 0.7, 0.01);
    assert!((f - 0.5).abs() < 1e-9);
    let flat = phi_derivative(&atoms, 5.0, PhiMethod::FiniteDifference).unwrap();
    let inside = phi_derivative(&atoms, 1.0, PhiMethod::FiniteDifference).unwrap();
    assert!(flat > 0.0 && flat < inside);
}

/// Quantile of a normal sample with known density, interval from the
/// moment variance over the squared density.
#[test]
fn gaussian_toy_coverage() {
    use tiee::simulation::rng::{derive_seed, open_uniform, stream_rng};
    let (n, tau, reps) = (500usize, 0.7, 2000usize);
    let z = statrs::distribution::Normal::standard();
    use statrs::distribution::{Continuous, ContinuousCDF};
    let truth = z.inverse_cdf(tau);
    let f = z.pdf(truth);
    let mut covered = 0;
    for r in 0..reps {
        let mut rng = stream_rng(derive_seed(99, r as u64), 0);
        let w: Vec<f64> = (0..n).map(|_| z.inverse_cdf(open_uniform(&mut rng))).collect();
        let theta = weighted_quantile(&WeightedSample::unweighted(w.clone()).unwrap(), tau).unwrap();
        let g: Vec<f64> = w.iter().map(|&x| f64::from(u8::from(x <= theta)) - tau).collect();
        let v = moment_variance(&g).unwrap() / (f * f);
        let (lo, hi) = confidence_interval(theta, v, n, 0.10).unwrap();
        covered += usize::from(lo <= truth && truth <= hi);
    }
    let cov = covered as f64 / reps as f64;
    assert!((0.87..=0.93).contains(&cov), "coverage {cov}");
    assert!((normal_quantile(0.95) - 1.6448536).abs() < 1e-6);
}

#[test]
fn gpd_continuity_at_zero_shape() {
    common::gpd_xi_continuity().unwrap();
}

#[test]
fn gpd_round_trip_grid() {
    common::gpd_round_trip().unwrap();
}

#[test]
fn signal_monotone_on_simulated_arms() {
    common::signal_monotone(24).unwrap();
}

#[test]
fn solver_matches_empirical_quantile_in_body() {
    common::body_equivalence().unwrap();
}

#[test]
fn solver_rescaling_invariance() {
    common::rescaling_invariance(200).unwrap();
}

#[test]
fn gpd_parameter_recovery() {
    common::gpd_recovery().unwrap();
}

#[test]
fn glm_parameter_recovery() {
    common::glm_recovery().unwrap();
}

#[test]
fn sandwich_special_cases() {
    common::sandwich_cases().unwrap();
}

#[test]
fn sandwich_reparameterization() {
    common::sandwich_reparameterization(40).unwrap();
}
