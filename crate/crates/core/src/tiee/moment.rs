//! Unit-level moment `g_i(theta)` and nuisance scores `psi_i` for one arm,
//! with the plug-in blocks of the stacked system.
//!
//! Nuisance vector: `(u, tail scale coefficients, xi, propensity coefficients)`.
//! Weights are inverse propensities normalized to mean one over the full
//! sample; off-arm units carry zero weight.

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evt::gpd::{gpd_log_density_grad, log_linear_scale, GpdTail};
use crate::inference::SandwichParts;
use crate::propensity::PropensityFit;

use super::recon::{tail_row, ReconstructedQuantile};

const TAIL_STEP: f64 = 1e-5;
const PROPENSITY_STEP: f64 = 1e-6;

pub(crate) struct ArmMoment<'a> {
    ds: &'a Dataset,
    d: u8,
    tau: f64,
    recon: &'a ReconstructedQuantile,
    /// Propensity fit when the weights are inverse propensities.
    fit: Option<&'a PropensityFit>,
    rows: Vec<Vec<f64>>,
}

/// Per-unit moment and nuisance-adjusted influence values.
pub(crate) struct MomentOutput {
    pub g: Vec<f64>,
    pub adjusted: Vec<f64>,
    pub parts: Option<SandwichParts>,
}

impl<'a> ArmMoment<'a> {
    pub fn new(
        ds: &'a Dataset,
        d: u8,
        tau: f64,
        recon: &'a ReconstructedQuantile,
        fit: Option<&'a PropensityFit>,
    ) -> Self {
        let rows = (0..ds.n()).map(|i| tail_row(ds, i, &recon.tail_covariates)).collect();
        Self { ds, d, tau, recon, fit, rows }
    }

    fn n(&self) -> usize {
        self.ds.n()
    }

    fn q_tail(&self) -> usize {
        self.recon.scale_coefs.len() + 1
    }

    fn q_prop(&self) -> usize {
        self.fit.map_or(0, |f| f.n_params())
    }

    /// Normalized weights at propensity probabilities `probs`.
    fn weights_from(&self, probs: Option<&[f64]>) -> Vec<f64> {
        let raw: Vec<f64> = self
            .ds
            .observations()
            .iter()
            .enumerate()
            .map(|(i, o)| {
                if o.d != self.d {
                    0.0
                } else {
                    match probs {
                        Some(p) => 1.0 / if self.d == 1 { p[i] } else { 1.0 - p[i] },
                        None => 1.0,
                    }
                }
            })
            .collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        raw.into_iter().map(|r| r / mean).collect()
    }

    fn weights_at(&self, beta: &[f64]) -> Vec<f64> {
        match self.fit {
            Some(f) => self.weights_from(Some(&f.probabilities_at(beta))),
            None => self.weights_from(None),
        }
    }

    fn tail_of(&self, i: usize, u: f64, tail: &[f64]) -> GpdTail {
        let k = tail.len() - 1;
        GpdTail {
            u,
            p_u: self.recon.p_u,
            sigma: log_linear_scale(&tail[..k], &self.rows[i]),
            xi: tail[k],
            scale_coefs: None,
        }
    }

    fn tail_params(&self) -> Vec<f64> {
        let mut t = self.recon.scale_coefs.clone();
        t.push(self.recon.xi);
        t
    }

    /// `g_i = w_i [1{Y<=theta, Y<=u} + 1{Y>u} 1{theta>=u} H_i(theta)] - tau w_i`,
    /// with the exceedance set fixed by `set_u`.
    fn g_values(&self, theta: f64, u: f64, set_u: f64, tail: &[f64], w: &[f64]) -> Vec<f64> {
        self.ds
            .observations()
            .iter()
            .enumerate()
            .map(|(i, o)| {
                if w[i] == 0.0 {
                    return 0.0;
                }
                let ind = if o.y <= set_u {
                    if o.y <= theta {
                        1.0
                    } else {
                        0.0
                    }
                } else if theta >= u {
                    self.tail_of(i, u, tail).excess_cdf(theta)
                } else {
                    0.0
                };
                w[i] * (ind - self.tau)
            })
            .collect()
    }

    /// Tail score rows `w_i 1{Y > set_u} grad log h(Y - u)` over `(b, xi)`.
    fn tail_scores(&self, u: f64, set_u: f64, tail: &[f64], w: &[f64]) -> Vec<Vec<f64>> {
        let q = self.q_tail();
        self.ds
            .observations()
            .iter()
            .enumerate()
            .map(|(i, o)| {
                let mut s = vec![0.0; q];
                if w[i] == 0.0 || o.y <= set_u {
                    return s;
                }
                let t = self.tail_of(i, u, tail);
                let [d_eta, d_xi] = gpd_log_density_grad((o.y - u).max(0.0), t.sigma, t.xi);
                s[0] = w[i] * d_eta;
                for (c, x) in self.rows[i].iter().enumerate() {
                    s[c + 1] = w[i] * d_eta * x;
                }
                s[q - 1] = w[i] * d_xi;
                s
            })
            .collect()
    }

    fn threshold_scores(&self, u: f64, w: &[f64]) -> Vec<f64> {
        let p_u = self.recon.p_u;
        self.ds
            .observations()
            .iter()
            .zip(w)
            .map(|(o, &wi)| wi * (if o.y <= u { 1.0 } else { 0.0 } - p_u))
            .collect()
    }

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn col_means(rows: &[Vec<f64>], q: usize) -> Vec<f64> {
        let n = rows.len() as f64;
        (0..q).map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / n).collect()
    }

    /// Moment values only (no nuisance adjustment).
    pub fn simple(&self, theta: f64) -> MomentOutput {
        let beta = self.fit.map(|f| f.coefficients.clone()).unwrap_or_default();
        let w = self.weights_at(&beta);
        let u = self.recon.u;
        let g = self.g_values(theta, u, u, &self.tail_params(), &w);
        MomentOutput { adjusted: g.clone(), g, parts: None }
    }

    /// Moment values, sandwich blocks and adjusted influence
    /// `g_i - A M^-1 psi_i`.
    pub fn sandwich(&self, theta: f64) -> Result<MomentOutput> {
        let n = self.n();
        let qt = self.q_tail();
        let qp = self.q_prop();
        let k = 1 + qt + qp;
        let u = self.recon.u;
        let tail = self.tail_params();
        let beta = self.fit.map(|f| f.coefficients.clone()).unwrap_or_default();
        let w = self.weights_at(&beta);

        let g = self.g_values(theta, u, u, &tail, &w);
        let psi_u = self.threshold_scores(u, &w);
        let psi_t = self.tail_scores(u, u, &tail, &w);
        let psi_p = self.fit.map(|f| f.scores());

        let mut psi = DMatrix::zeros(n, k);
        for i in 0..n {
            psi[(i, 0)] = psi_u[i];
            for c in 0..qt {
                psi[(i, 1 + c)] = psi_t[i][c];
            }
            if let Some(p) = &psi_p {
                for c in 0..qp {
                    psi[(i, 1 + qt + c)] = p[(i, c)];
                }
            }
        }

        let f_u = self.recon.threshold_density();
        let mut a = DVector::zeros(k);
        let mut m = DMatrix::zeros(k, k);

        // threshold row and column
        m[(0, 0)] = f_u;
        let hu = 1e-6 * u.abs().max(1.0);
        let smooth_u = |du: f64| Self::col_means(&self.tail_scores(u + du, u, &tail, &w), qt);
        let (sp, sm) = (smooth_u(hu), smooth_u(-hu));
        let boundary = self.boundary_score();
        for c in 0..qt {
            m[(1 + c, 0)] = (sp[c] - sm[c]) / (2.0 * hu) - f_u * boundary[c];
        }
        if theta >= u {
            let mean_g = |du: f64| Self::mean(&self.g_values(theta, u + du, u, &tail, &w));
            let smooth = (mean_g(hu) - mean_g(-hu)) / (2.0 * hu);
            a[0] = f_u * (1.0 - self.recon.tail_cdf(theta)) + smooth;
        }

        // tail parameters
        for j in 0..qt {
            let mut tp = tail.clone();
            let mut tm = tail.clone();
            tp[j] += TAIL_STEP;
            tm[j] -= TAIL_STEP;
            let dp = Self::col_means(&self.tail_scores(u, u, &tp, &w), qt);
            let dm = Self::col_means(&self.tail_scores(u, u, &tm, &w), qt);
            for c in 0..qt {
                m[(1 + c, 1 + j)] = (dp[c] - dm[c]) / (2.0 * TAIL_STEP);
            }
            if theta >= u {
                let gp = Self::mean(&self.g_values(theta, u, u, &tp, &w));
                let gm = Self::mean(&self.g_values(theta, u, u, &tm, &w));
                a[1 + j] = (gp - gm) / (2.0 * TAIL_STEP);
            }
        }

        // propensity coefficients
        if let Some(fit) = self.fit {
            let jac = fit.score_jacobian();
            for r in 0..qp {
                for c in 0..qp {
                    m[(1 + qt + r, 1 + qt + c)] = jac[(r, c)];
                }
            }
            for j in 0..qp {
                let h = PROPENSITY_STEP * beta[j].abs().max(1.0);
                let mut bp = beta.clone();
                let mut bm = beta.clone();
                bp[j] += h;
                bm[j] -= h;
                let (wp, wm) = (self.weights_at(&bp), self.weights_at(&bm));
                let col = 1 + qt + j;
                m[(0, col)] = (Self::mean(&self.threshold_scores(u, &wp)) - Self::mean(&self.threshold_scores(u, &wm)))
                    / (2.0 * h);
                let tp = Self::col_means(&self.tail_scores(u, u, &tail, &wp), qt);
                let tm = Self::col_means(&self.tail_scores(u, u, &tail, &wm), qt);
                for c in 0..qt {
                    m[(1 + c, col)] = (tp[c] - tm[c]) / (2.0 * h);
                }
                a[col] = (Self::mean(&self.g_values(theta, u, u, &tail, &wp))
                    - Self::mean(&self.g_values(theta, u, u, &tail, &wm)))
                    / (2.0 * h);
            }
        }

        let g_mean = Self::mean(&g);
        let psi_mean: Vec<f64> = (0..k).map(|c| psi.column(c).sum() / n as f64).collect();
        let mut sigma_psi = DMatrix::zeros(k, k);
        let mut sigma_g_psi = DVector::zeros(k);
        for i in 0..n {
            for r in 0..k {
                let dr = psi[(i, r)] - psi_mean[r];
                sigma_g_psi[r] += (g[i] - g_mean) * dr;
                for c in 0..=r {
                    sigma_psi[(r, c)] += dr * (psi[(i, c)] - psi_mean[c]);
                }
            }
        }
        for r in 0..k {
            for c in 0..r {
                sigma_psi[(c, r)] = sigma_psi[(r, c)];
            }
        }
        sigma_psi /= n as f64;
        sigma_g_psi /= n as f64;

        let parts = SandwichParts { a_zeta: a.clone(), m: m.clone(), sigma_psi, sigma_g_psi };
        // c solves M^T c = A^T, so that A M^-1 psi_i = psi_i . c
        let mt = m.transpose();
        let scale = mt.abs().max().max(f64::MIN_POSITIVE);
        let svd = mt.clone().svd(false, false);
        if !(svd.singular_values.min() > 1e-12 * scale) {
            return Err(Error::SingularNuisance);
        }
        let c = mt.lu().solve(&a).ok_or(Error::SingularNuisance)?;
        let adjusted: Vec<f64> = (0..n).map(|i| g[i] - psi.row(i).transpose().dot(&c)).collect();
        Ok(MomentOutput { g, adjusted, parts: Some(parts) })
    }

    /// Mean tail score at zero excess over the exceedance mixture:
    /// `-(1, x_bar)` for the scale coefficients, `0` for `xi`.
    fn boundary_score(&self) -> Vec<f64> {
        let qt = self.q_tail();
        let mut s = vec![0.0; qt];
        s[0] = -1.0;
        for unit in &self.recon.tail_units {
            for (c, x) in unit.x.iter().enumerate() {
                s[c + 1] -= unit.omega * x;
            }
        }
        s
    }
}
