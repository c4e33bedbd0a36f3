use serde::{Deserialize, Serialize};

use crate::dataset::{weighted_quantile, Dataset, WeightedSample};
use crate::error::{Error, Result};
use crate::evt::gpd::{self, log_linear_scale, GpdTail, XI_ZERO};
use crate::propensity::ArmWeights;

use super::grid::Grid;

/// Whether the GPD scale depends on covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMode {
    Constant,
    #[default]
    Covariate,
}

impl std::str::FromStr for TailMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "covariate" => Ok(Self::Covariate),
            other => Err(Error::Usage(format!("unknown tail mode `{other}`"))),
        }
    }
}

/// One component of the tail mixture: a unit's tail covariates and its
/// normalized weight among the exceedances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailUnit {
    pub x: Vec<f64>,
    pub omega: f64,
}

/// Empirical weighted body below `p_u` joined to a GPD tail above it.
///
/// In covariate mode each exceedance unit carries its own tail curve
/// `Q_i(p)`; the curves share the body.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedQuantile {
    body: Option<WeightedSample>,
    pub p_u: f64,
    pub u: f64,
    pub xi: f64,
    /// `log sigma(x) = b0 + b'x`; a single entry in constant mode.
    pub scale_coefs: Vec<f64>,
    pub tail_units: Vec<TailUnit>,
    /// Covariate columns entering the tail scale.
    pub tail_covariates: Vec<usize>,
    pub fallback: bool,
    pub n_exceedances: usize,
}

impl ReconstructedQuantile {
    /// Constant-scale reconstruction from a known tail.
    pub fn from_tail(body: Option<WeightedSample>, tail: &GpdTail) -> Result<Self> {
        if body.is_none() && tail.p_u > 0.0 {
            return Err(Error::Usage("a body sample is required when p_u > 0".into()));
        }
        Ok(Self {
            body,
            p_u: tail.p_u,
            u: tail.u,
            xi: tail.xi,
            scale_coefs: vec![tail.sigma.ln()],
            tail_units: vec![TailUnit { x: Vec::new(), omega: 1.0 }],
            tail_covariates: Vec::new(),
            fallback: false,
            n_exceedances: 0,
        })
    }

    pub fn body(&self) -> Option<&WeightedSample> {
        self.body.as_ref()
    }

    pub fn is_constant(&self) -> bool {
        self.scale_coefs.len() == 1
    }

    /// Tail of unit `j` as a standalone [`GpdTail`].
    pub fn unit_tail(&self, j: usize) -> GpdTail {
        GpdTail {
            u: self.u,
            p_u: self.p_u,
            sigma: log_linear_scale(&self.scale_coefs, &self.tail_units[j].x),
            xi: self.xi,
            scale_coefs: None,
        }
    }

    /// The fitted tail model; carries `scale_coefs` in covariate mode.
    pub fn tail(&self) -> GpdTail {
        let mut t = self.unit_tail(0);
        if !self.is_constant() {
            t.scale_coefs = Some(self.scale_coefs.clone());
        }
        t
    }

    pub fn tail_mass(&self) -> f64 {
        1.0 - self.p_u
    }

    fn body_quantile(&self, p: f64) -> f64 {
        match &self.body {
            Some(b) => weighted_quantile(b, p).unwrap_or(self.u),
            None => self.u,
        }
    }

    /// `Q_j(p)` for tail unit `j`; body quantile for `p <= p_u`.
    pub fn unit_quantile(&self, j: usize, p: f64) -> f64 {
        if p <= self.p_u {
            return self.body_quantile(p);
        }
        if p >= 1.0 {
            return match self.unit_tail(j).upper_endpoint() {
                Some(e) => e,
                None => f64::INFINITY,
            };
        }
        self.unit_tail(j).quantile_unchecked(p)
    }

    /// Mixture conditional cdf `P(Y <= y | Y > u)`.
    pub fn tail_cdf(&self, y: f64) -> f64 {
        self.tail_units
            .iter()
            .enumerate()
            .map(|(j, t)| t.omega * self.unit_tail(j).excess_cdf(y))
            .sum()
    }

    /// Mixture density of the reconstruction at `y > u`.
    pub fn tail_density(&self, y: f64) -> f64 {
        if y <= self.u {
            return 0.0;
        }
        let h: f64 = self
            .tail_units
            .iter()
            .enumerate()
            .map(|(j, t)| t.omega * self.unit_tail(j).excess_density(y - self.u))
            .sum();
        self.tail_mass() * h
    }

    /// Density at the threshold from the right, `(1 - p_u) sum_j omega_j / sigma_j`.
    pub fn threshold_density(&self) -> f64 {
        let s: f64 = self
            .tail_units
            .iter()
            .enumerate()
            .map(|(j, t)| t.omega / self.unit_tail(j).sigma)
            .sum();
        self.tail_mass() * s
    }

    /// Continuous reconstructed cdf.
    pub fn cdf(&self, y: f64) -> f64 {
        if y < self.u {
            return match &self.body {
                Some(b) => b.cdf(y).min(self.p_u),
                None => 0.0,
            };
        }
        self.p_u + self.tail_mass() * self.tail_cdf(y)
    }

    /// Marginal reconstructed quantile; the mixture is inverted by bisection.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("quantile level {p} outside (0, 1)")));
        }
        if p <= self.p_u || self.tail_units.len() == 1 {
            return Ok(self.unit_quantile(0, p));
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for j in 0..self.tail_units.len() {
            let q = self.unit_quantile(j, p);
            lo = lo.min(q);
            hi = hi.max(q);
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) >= p {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-12 * hi.abs().max(1.0) {
                break;
            }
        }
        Ok(hi)
    }

    /// Grid atoms `Q_j(p_k)` with masses `omega_j (p_k - p_{k-1})`; body atoms
    /// are shared. Infinite atoms never fire and are dropped.
    pub fn atoms(&self, grid: &Grid) -> Result<WeightedSample> {
        let mut values = Vec::with_capacity(grid.len() * 2);
        let mut masses = Vec::with_capacity(grid.len() * 2);
        for (p, dp) in grid.steps() {
            if p <= self.p_u {
                values.push(self.body_quantile(p));
                masses.push(dp);
            } else {
                for (j, t) in self.tail_units.iter().enumerate() {
                    let q = self.unit_quantile(j, p);
                    if q.is_finite() && t.omega > 0.0 {
                        values.push(q);
                        masses.push(t.omega * dp);
                    }
                }
            }
        }
        WeightedSample::new(values, masses)
    }
}

/// Tail covariate row for unit `i`.
pub(crate) fn tail_row(dataset: &Dataset, i: usize, cols: &[usize]) -> Vec<f64> {
    let x = &dataset.get(i).x;
    cols.iter().map(|&c| x[c]).collect()
}

/// Builds the reconstruction of arm `weights.arm` at body mass `p_u`.
pub fn reconstruct_quantile(
    dataset: &Dataset,
    weights: &ArmWeights,
    p_u: f64,
    mode: TailMode,
    tail_covariates: &[usize],
) -> Result<ReconstructedQuantile> {
    if !(p_u > 0.0 && p_u < 1.0) {
        return Err(Error::Domain(format!("threshold level {p_u} outside (0, 1)")));
    }
    if let Some(&c) = tail_covariates.iter().find(|&&c| c >= dataset.cov_dim()) {
        return Err(Error::Usage(format!("tail covariate index {c} out of range")));
    }
    let body = weights.sample(dataset)?;
    let u = weighted_quantile(&body, p_u)?;
    let exc: Vec<(usize, f64)> = weights
        .indices
        .iter()
        .zip(&weights.weights)
        .filter(|(&i, _)| dataset.get(i).y > u)
        .map(|(&i, &w)| (i, w))
        .collect();
    if exc.len() < gpd::MIN_EXCEEDANCES {
        return Err(Error::InsufficientTailData { needed: gpd::MIN_EXCEEDANCES, got: exc.len() });
    }
    let e: Vec<f64> = exc.iter().map(|&(i, _)| dataset.get(i).y - u).collect();
    let w: Vec<f64> = exc.iter().map(|&(_, w)| w).collect();
    let w_total: f64 = w.iter().sum();

    let (scale_coefs, xi, fallback, cols) = match mode {
        TailMode::Constant => {
            let fit = gpd::fit_gpd(&WeightedSample::new(e, w.clone())?)?;
            (vec![fit.sigma.ln()], fit.xi, fit.fallback, Vec::new())
        }
        TailMode::Covariate => {
            let rows: Vec<Vec<f64>> = exc.iter().map(|&(i, _)| tail_row(dataset, i, tail_covariates)).collect();
            let fit = gpd::fit_gpd_covariate(&e, &w, &rows)?;
            (fit.scale_coefs, fit.xi, fit.fallback, tail_covariates.to_vec())
        }
    };
    if fallback {
        log::warn!("GPD optimizer failed for arm {}; using moment estimates", weights.arm);
    }
    let tail_units = if cols.is_empty() {
        vec![TailUnit { x: Vec::new(), omega: 1.0 }]
    } else {
        exc.iter()
            .map(|&(i, wi)| TailUnit { x: tail_row(dataset, i, &cols), omega: wi / w_total })
            .collect()
    };
    let xi = if xi.abs() <= XI_ZERO { 0.0 } else { xi };
    Ok(ReconstructedQuantile {
        body: Some(body),
        p_u,
        u,
        xi,
        scale_coefs,
        tail_units,
        tail_covariates: cols,
        fallback,
        n_exceedances: exc.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn body_branch_is_exact() {
        let body = WeightedSample::unweighted((1..=20).map(f64::from).collect()).unwrap();
        let tail = GpdTail::new(18.0, 0.9, 1.0, 0.2).unwrap();
        let r = ReconstructedQuantile::from_tail(Some(body.clone()), &tail).unwrap();
        for p in [0.05, 0.31, 0.5, 0.9] {
            assert_eq!(r.unit_quantile(0, p), weighted_quantile(&body, p).unwrap());
        }
        assert!(r.unit_quantile(0, 0.9 + 1e-12) >= 18.0);
    }

    #[test]
    fn atoms_total_mass() {
        let tail = GpdTail::new(0.0, 0.0, 1.0, 0.0).unwrap();
        let r = ReconstructedQuantile::from_tail(None, &tail).unwrap();
        let g = Grid::uniform(100).unwrap();
        let a = r.atoms(&g).unwrap();
        // the atom at p = 1 is infinite and dropped
        assert!((a.total_weight() - 0.99).abs() < 1e-12);
    }
}
