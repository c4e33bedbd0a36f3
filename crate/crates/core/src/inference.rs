//! Moment variances, density of the estimating equation, EQTE variance,
//! normal intervals and the nuisance-adjusted sandwich.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::WeightedSample;
use crate::error::{Error, Result};

/// `(1/n) sum g_i^2 - ((1/n) sum g_i)^2`.
pub fn moment_variance(g: &[f64]) -> Result<f64> {
    if g.len() < 2 {
        return Err(Error::InsufficientData(format!("moment variance needs 2 values, got {}", g.len())));
    }
    moment_covariance(g, g)
}

/// Mean-corrected cross moment `(1/n) sum g1_i g0_i - mean(g1) mean(g0)`.
pub fn moment_covariance(g1: &[f64], g0: &[f64]) -> Result<f64> {
    if g1.len() != g0.len() {
        return Err(Error::Usage(format!("covariance over {} and {} values", g1.len(), g0.len())));
    }
    if g1.is_empty() {
        return Err(Error::InsufficientData("covariance of empty vectors".into()));
    }
    let n = g1.len() as f64;
    let m1 = g1.iter().sum::<f64>() / n;
    let m0 = g0.iter().sum::<f64>() / n;
    let cross = g1.iter().zip(g0).map(|(a, b)| (a - m1) * (b - m0)).sum::<f64>() / n;
    Ok(cross)
}

/// How the derivative of the estimating equation is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiMethod {
    /// Tail density of the reconstruction above the threshold, finite
    /// difference (with kernel fallback) below it.
    #[default]
    Auto,
    FiniteDifference,
    Kde,
    TailDensity,
}

impl std::str::FromStr for PhiMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "finite_difference" | "fd" => Ok(Self::FiniteDifference),
            "kde" => Ok(Self::Kde),
            "tail_density" => Ok(Self::TailDensity),
            other => Err(Error::Usage(format!("unknown derivative method `{other}`"))),
        }
    }
}

/// Central difference `[S(theta + h) - S(theta - h)] / (2h)`.
pub fn finite_difference<F: Fn(f64) -> f64>(s_n: F, theta: f64, h: f64) -> f64 {
    (s_n(theta + h) - s_n(theta - h)) / (2.0 * h)
}

/// Step for [`finite_difference`] on a step function with sorted atoms:
/// `max(1e-3 |theta|, 5 * local spacing)`.
pub fn step_for_atoms(atoms: &WeightedSample, theta: f64) -> f64 {
    let v = atoms.values();
    let idx = v.partition_point(|&a| a < theta);
    let lo = idx.saturating_sub(5);
    let hi = (idx + 5).min(v.len() - 1);
    let spacing = if hi > lo { (v[hi] - v[lo]) / (hi - lo) as f64 } else { 0.0 };
    (1e-3 * theta.abs()).max(5.0 * spacing).max(f64::EPSILON)
}

/// Weighted Gaussian kernel density of the atoms (Silverman bandwidth),
/// scaled by the atoms' total mass.
pub fn kde_density(atoms: &WeightedSample, theta: f64) -> f64 {
    let w = atoms.weights();
    let v = atoms.values();
    let total = atoms.total_weight();
    let mean = v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / total;
    let var = v.iter().zip(w).map(|(a, b)| b * (a - mean).powi(2)).sum::<f64>() / total;
    let q = |p: f64| atoms.quantile(p).unwrap_or(mean);
    let iqr = (q(0.75) - q(0.25)) / 1.34;
    let spread = if iqr > 0.0 { var.sqrt().min(iqr) } else { var.sqrt() };
    let n_eff = total * total / w.iter().map(|x| x * x).sum::<f64>();
    let h = 0.9 * spread * n_eff.powf(-0.2);
    if !(h > 0.0) {
        return 0.0;
    }
    let norm = (2.0 * std::f64::consts::PI).sqrt() * h;
    v.iter().zip(w).map(|(a, b)| b * (-0.5 * ((theta - a) / h).powi(2)).exp()).sum::<f64>() / norm
}

/// Finite difference of `S_n`, falling back to the kernel estimate when the
/// difference vanishes.
pub fn phi_derivative(atoms: &WeightedSample, theta: f64, method: PhiMethod) -> Result<f64> {
    let s_n = |t: f64| signal_mass(atoms, t);
    let fd = || finite_difference(s_n, theta, step_for_atoms(atoms, theta));
    let value = match method {
        PhiMethod::Kde => kde_density(atoms, theta),
        PhiMethod::FiniteDifference | PhiMethod::Auto | PhiMethod::TailDensity => {
            let d = fd();
            if d > 0.0 {
                d
            } else {
                kde_density(atoms, theta)
            }
        }
    };
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(Error::FlatMoment(theta))
    }
}

/// Unnormalized mass of atoms `<= theta`.
pub fn signal_mass(atoms: &WeightedSample, theta: f64) -> f64 {
    let idx = atoms.values().partition_point(|&a| a <= theta);
    atoms.weights()[..idx].iter().sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sigma11: f64,
    pub sigma00: f64,
    pub sigma10: f64,
    pub phi_prime1: f64,
    pub phi_prime0: f64,
}

impl VarianceComponents {
    pub fn from_moments(g1: &[f64], g0: &[f64], phi_prime1: f64, phi_prime0: f64) -> Result<Self> {
        Ok(Self {
            sigma11: moment_variance(g1)?,
            sigma00: moment_variance(g0)?,
            sigma10: moment_covariance(g1, g0)?,
            phi_prime1,
            phi_prime0,
        })
    }
}

/// `S11/P1^2 + S00/P0^2 - 2 S10/(P1 P0)`, floored at zero.
pub fn eqte_variance(c: &VarianceComponents) -> Result<f64> {
    if c.phi_prime1 == 0.0 {
        return Err(Error::FlatMoment(c.phi_prime1));
    }
    if c.phi_prime0 == 0.0 {
        return Err(Error::FlatMoment(c.phi_prime0));
    }
    let v = c.sigma11 / c.phi_prime1.powi(2) + c.sigma00 / c.phi_prime0.powi(2)
        - 2.0 * c.sigma10 / (c.phi_prime1 * c.phi_prime0);
    if v < 0.0 {
        log::warn!("EQTE variance plug-in {v} is negative; flooring at 0");
        return Ok(0.0);
    }
    Ok(v)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// `delta +- z_{1 - alpha/2} sigma / sqrt(n)`.
pub fn confidence_interval(delta: f64, sigma_delta_sq: f64, n: usize, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha {alpha} outside (0, 1)")));
    }
    if !(sigma_delta_sq >= 0.0) || n == 0 {
        return Err(Error::Domain("variance must be nonnegative and n positive".into()));
    }
    let half = normal_quantile(1.0 - alpha / 2.0) * (sigma_delta_sq / n as f64).sqrt();
    Ok((delta - half, delta + half))
}

/// Blocks of the stacked moment/nuisance system.
#[derive(Debug, Clone, PartialEq)]
pub struct SandwichParts {
    /// Sensitivity of the moment to the nuisance, `1 x k`.
    pub a_zeta: DVector<f64>,
    /// Nuisance Jacobian, `k x k`.
    pub m: DMatrix<f64>,
    /// Covariance of the nuisance scores.
    pub sigma_psi: DMatrix<f64>,
    /// Covariance between moment and nuisance scores, `1 x k`.
    pub sigma_g_psi: DVector<f64>,
}

impl SandwichParts {
    pub fn k(&self) -> usize {
        self.a_zeta.len()
    }

    fn m_inverse(&self) -> Result<DMatrix<f64>> {
        let k = self.k();
        if self.m.nrows() != k || self.m.ncols() != k || self.sigma_psi.nrows() != k || self.sigma_g_psi.len() != k {
            return Err(Error::Usage("sandwich blocks have inconsistent sizes".into()));
        }
        if k == 0 {
            return Ok(DMatrix::zeros(0, 0));
        }
        let scale = self.m.abs().max().max(f64::MIN_POSITIVE);
        let svd = self.m.clone().svd(false, false);
        let smin = svd.singular_values.min();
        if !(smin > 1e-12 * scale) {
            return Err(Error::SingularNuisance);
        }
        self.m.clone().try_inverse().ok_or(Error::SingularNuisance)
    }

    /// `V_zeta = M^-1 Sigma_psi M^-T`.
    pub fn v_zeta(&self) -> Result<DMatrix<f64>> {
        let mi = self.m_inverse()?;
        Ok(&mi * &self.sigma_psi * mi.transpose())
    }

    /// `C = M^-1 Sigma_{g,psi}^T`.
    pub fn c(&self) -> Result<DVector<f64>> {
        Ok(self.m_inverse()? * &self.sigma_g_psi)
    }
}

/// `[sigma^2 + A V_zeta A^T - 2 A C] / phi'^2`.
pub fn sandwich_variance(sigma_sq: f64, phi_prime: f64, parts: &SandwichParts) -> Result<f64> {
    if phi_prime == 0.0 {
        return Err(Error::FlatMoment(phi_prime));
    }
    let v_zeta = parts.v_zeta()?;
    let c = parts.c()?;
    let a = &parts.a_zeta;
    let inflation = (a.transpose() * &v_zeta * a)[(0, 0)];
    let cross = a.dot(&c);
    let v = (sigma_sq + inflation - 2.0 * cross) / (phi_prime * phi_prime);
    if v < 0.0 {
        log::warn!("sandwich variance plug-in {v} is negative; flooring at 0");
        return Ok(0.0);
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moment_variance_examples() {
        assert!((moment_variance(&[1.0, -1.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(moment_variance(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!((moment_variance(&[0.2, -0.1, 0.3, -0.4]).unwrap() - 0.075).abs() < 1e-15);
        assert!(matches!(moment_variance(&[1.0]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn covariance_examples() {
        let g = [0.3, -0.2, 0.5, 0.1];
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let s11 = moment_variance(&g).unwrap();
        assert!((moment_covariance(&g, &g).unwrap() - s11).abs() < 1e-15);
        assert!((moment_covariance(&g, &neg).unwrap() + s11).abs() < 1e-15);
        assert!(matches!(moment_covariance(&g, &g[..2]), Err(Error::Usage(_))));
    }

    #[test]
    fn eqte_variance_examples() {
        let c = |s11, s00, s10, p1, p0| VarianceComponents {
            sigma11: s11,
            sigma00: s00,
            sigma10: s10,
            phi_prime1: p1,
            phi_prime0: p0,
        };
        assert_eq!(eqte_variance(&c(1.0, 1.0, 0.0, 1.0, 1.0)).unwrap(), 2.0);
        assert_eq!(eqte_variance(&c(1.0, 1.0, 1.0, 1.0, 1.0)).unwrap(), 0.0);
        assert!((eqte_variance(&c(4.0, 1.0, 0.5, 0.5, 0.25)).unwrap() - 24.0).abs() < 1e-12);
        assert!(matches!(eqte_variance(&c(1.0, 1.0, 0.0, 0.0, 1.0)), Err(Error::FlatMoment(_))));
    }

    #[test]
    fn interval_examples() {
        let (lo, hi) = confidence_interval(0.0, 1.0, 100, 0.1).unwrap();
        assert!((hi - 0.164485).abs() < 1e-5 && (lo + hi).abs() < 1e-15);
        assert_eq!(confidence_interval(2.5, 0.0, 10, 0.1).unwrap(), (2.5, 2.5));
        let (lo, hi) = confidence_interval(3.0, 4.0, 400, 0.05).unwrap();
        assert!((hi - (3.0 + 1.959964 * 0.1)).abs() < 1e-6);
        assert!((lo - (3.0 - 1.959964 * 0.1)).abs() < 1e-6);
    }

    #[test]
    fn sandwich_scalar_example() {
        let parts = SandwichParts {
            a_zeta: DVector::from_vec(vec![2.0]),
            m: DMatrix::from_element(1, 1, 1.0),
            sigma_psi: DMatrix::from_element(1, 1, 0.25),
            sigma_g_psi: DVector::from_vec(vec![0.1]),
        };
        assert!((sandwich_variance(1.0, 0.5, &parts).unwrap() - 6.4).abs() < 1e-12);
    }

    #[test]
    fn singular_nuisance() {
        let parts = SandwichParts {
            a_zeta: DVector::from_vec(vec![1.0, 1.0]),
            m: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]),
            sigma_psi: DMatrix::identity(2, 2),
            sigma_g_psi: DVector::zeros(2),
        };
        assert_eq!(sandwich_variance(1.0, 1.0, &parts), Err(Error::SingularNuisance));
    }

    #[test]
    fn linear_signal_derivative() {
        let d = finite_difference(|t| 0.5 * t + 3.0, 2.0, 0.01);
        assert!((d - 0.5).abs() < 1e-9);
    }

    #[test]
    fn flat_beyond_atoms() {
        let atoms = WeightedSample::new(vec![1.0, 2.0, 3.0], vec![0.3, 0.3, 0.3]).unwrap();
        assert!(phi_derivative(&atoms, 1e6, PhiMethod::FiniteDifference).is_err());
    }
}
