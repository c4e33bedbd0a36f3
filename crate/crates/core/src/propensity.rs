//! Propensity score models: Bernoulli GLMs on polynomial bases, clipped
//! inverse probability weights, and the per-observation score vectors that
//! feed the sandwich variance.

use std::fmt;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, WeightedSample};
use crate::error::{Error, Result};

pub const DEFAULT_CLIP: f64 = 0.01;
const TOLERANCE: f64 = 1e-8;
const MAX_ITER: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Logit,
}

impl Link {
    fn mean(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => 1.0 / (1.0 + (-eta).exp()),
        }
    }
}

impl std::str::FromStr for Link {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Link::Identity),
            "logit" => Ok(Link::Logit),
            other => Err(Error::Usage(format!("unknown link `{other}`"))),
        }
    }
}

/// Basis and link of a propensity model.
///
/// Columns are laid out as: intercept, then `powers` in declaration order,
/// then `interactions` in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub intercept: bool,
    /// `(covariate index, exponent)`, one column each.
    pub powers: Vec<(usize, u32)>,
    /// Pairwise products `x_a * x_b`.
    pub interactions: Vec<(usize, usize)>,
    pub link: Link,
    pub clip: f64,
}

impl DesignSpec {
    pub fn intercept_only(link: Link) -> Self {
        Self { intercept: true, powers: Vec::new(), interactions: Vec::new(), link, clip: DEFAULT_CLIP }
    }

    /// Intercept plus `x_j, x_j^2, ..., x_j^{degrees[j]}` for every covariate.
    pub fn polynomial(link: Link, degrees: &[u32]) -> Self {
        let mut spec = Self::intercept_only(link);
        for (j, &deg) in degrees.iter().enumerate() {
            for p in 1..=deg {
                spec.powers.push((j, p));
            }
        }
        spec
    }

    pub fn with_power(mut self, cov: usize, exponent: u32) -> Self {
        self.powers.push((cov, exponent));
        self
    }

    pub fn with_interaction(mut self, a: usize, b: usize) -> Self {
        self.interactions.push((a, b));
        self
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip = clip;
        self
    }

    pub fn n_columns(&self) -> usize {
        usize::from(self.intercept) + self.powers.len() + self.interactions.len()
    }

    /// Parses a comma-separated basis such as `1,x,x^2,x*z`; covariate names
    /// resolve against `names` (dataset column order).
    pub fn parse_basis(basis: &str, names: &[String], link: Link) -> Result<Self> {
        let lookup = |name: &str| -> Result<usize> {
            names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Usage(format!("basis term `{name}` is not a covariate")))
        };
        let mut spec = Self { intercept: false, ..Self::intercept_only(link) };
        for raw in basis.split(',') {
            let term = raw.trim();
            if term.is_empty() {
                continue;
            }
            if term == "1" {
                spec.intercept = true;
            } else if let Some((a, b)) = term.split_once('*') {
                spec.interactions.push((lookup(a.trim())?, lookup(b.trim())?));
            } else if let Some((a, p)) = term.split_once('^') {
                let exponent: u32 = p
                    .trim()
                    .parse()
                    .map_err(|_| Error::Usage(format!("bad exponent in basis term `{term}`")))?;
                if exponent == 0 {
                    return Err(Error::Usage(format!("exponent must be >= 1 in `{term}`")));
                }
                spec.powers.push((lookup(a.trim())?, exponent));
            } else {
                spec.powers.push((lookup(term)?, 1));
            }
        }
        if spec.n_columns() == 0 {
            return Err(Error::Usage("empty basis".into()));
        }
        Ok(spec)
    }

    fn validate(&self, cov_dim: usize) -> Result<()> {
        let bad = self
            .powers
            .iter()
            .map(|&(j, _)| j)
            .chain(self.interactions.iter().flat_map(|&(a, b)| [a, b]))
            .find(|&j| j >= cov_dim);
        if let Some(j) = bad {
            return Err(Error::Usage(format!("design references covariate {j} but dataset has {cov_dim}")));
        }
        if self.powers.iter().any(|&(_, p)| p == 0) {
            return Err(Error::Usage("polynomial degrees must be >= 1".into()));
        }
        if !(self.clip > 0.0 && self.clip < 0.5) {
            return Err(Error::Usage(format!("clip {} outside (0, 0.5)", self.clip)));
        }
        Ok(())
    }

    fn row(&self, x: &[f64]) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.n_columns());
        if self.intercept {
            row.push(1.0);
        }
        row.extend(self.powers.iter().map(|&(j, p)| x[j].powi(p as i32)));
        row.extend(self.interactions.iter().map(|&(a, b)| x[a] * x[b]));
        row
    }
}

impl fmt::Display for DesignSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut terms = Vec::new();
        if self.intercept {
            terms.push("1".to_string());
        }
        for &(j, p) in &self.powers {
            terms.push(if p == 1 { format!("x{j}") } else { format!("x{j}^{p}") });
        }
        for &(a, b) in &self.interactions {
            terms.push(format!("x{a}*x{b}"));
        }
        write!(f, "{:?}[{}]", self.link, terms.join(","))
    }
}

/// Expands the design matrix (n x q) for `spec`.
pub fn build_design(dataset: &Dataset, spec: &DesignSpec) -> Result<DMatrix<f64>> {
    spec.validate(dataset.cov_dim())?;
    let q = spec.n_columns();
    let n = dataset.n();
    let mut m = DMatrix::zeros(n, q);
    for (i, obs) in dataset.observations().iter().enumerate() {
        for (c, v) in spec.row(&obs.x).into_iter().enumerate() {
            m[(i, c)] = v;
        }
    }
    Ok(m)
}

/// A fitted propensity model with clipped probabilities and scores.
#[derive(Debug, Clone)]
pub struct PropensityFit {
    pub coefficients: Vec<f64>,
    pub spec: DesignSpec,
    /// Clipped `P(D = 1 | X)` for every observation.
    pub probabilities: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    design: DMatrix<f64>,
    treatment: Vec<f64>,
}

impl PropensityFit {
    /// Fit with a known constant propensity; no parameters are estimated.
    pub fn constant(dataset: &Dataset, p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("propensity {p} outside (0, 1)")));
        }
        let spec = DesignSpec { intercept: false, ..DesignSpec::intercept_only(Link::Identity) };
        Ok(Self {
            coefficients: Vec::new(),
            spec,
            probabilities: vec![p; dataset.n()],
            converged: true,
            iterations: 0,
            design: DMatrix::zeros(dataset.n(), 0),
            treatment: dataset.treatments().map(f64::from).collect(),
        })
    }

    pub fn n_params(&self) -> usize {
        self.coefficients.len()
    }

    /// Clipped probabilities at arbitrary coefficients (for perturbation derivatives).
    pub fn probabilities_at(&self, coef: &[f64]) -> Vec<f64> {
        if coef.is_empty() {
            return self.probabilities.clone();
        }
        let beta = DVector::from_column_slice(coef);
        let eta = &self.design * beta;
        eta.iter().map(|&e| clip(self.spec.link.mean(e), self.spec.clip)).collect()
    }

    /// Probability of being in arm `d` for unit `i`.
    pub fn arm_probability(&self, i: usize, d: u8) -> f64 {
        let p = self.probabilities[i];
        if d == 1 {
            p
        } else {
            1.0 - p
        }
    }

    /// Per-observation score vectors `psi(W_i, zeta_hat)` (n x q).
    pub fn scores(&self) -> DMatrix<f64> {
        self.scores_at(&self.coefficients)
    }

    pub fn scores_at(&self, coef: &[f64]) -> DMatrix<f64> {
        let q = coef.len();
        let n = self.design.nrows();
        let probs = self.probabilities_at(coef);
        let raw = raw_probabilities(&self.design, coef, self.spec.link);
        let mut s = DMatrix::zeros(n, q);
        for i in 0..n {
            let (y, p) = (self.treatment[i], probs[i]);
            let factor = match self.spec.link {
                Link::Logit => y - p,
                Link::Identity => {
                    if is_clipped(raw[i], self.spec.clip) {
                        0.0
                    } else {
                        y / p - (1.0 - y) / (1.0 - p)
                    }
                }
            };
            for c in 0..q {
                s[(i, c)] = self.design[(i, c)] * factor;
            }
        }
        s
    }

    /// Mean Jacobian of the score, `M = E[d psi / d zeta]` (q x q).
    pub fn score_jacobian(&self) -> DMatrix<f64> {
        let q = self.n_params();
        let n = self.design.nrows();
        let raw = raw_probabilities(&self.design, &self.coefficients, self.spec.link);
        let mut m = DMatrix::zeros(q, q);
        for i in 0..n {
            let (y, p) = (self.treatment[i], self.probabilities[i]);
            let curvature = match self.spec.link {
                Link::Logit => p * (1.0 - p),
                Link::Identity => {
                    if is_clipped(raw[i], self.spec.clip) {
                        0.0
                    } else {
                        y / (p * p) + (1.0 - y) / ((1.0 - p) * (1.0 - p))
                    }
                }
            };
            let row = self.design.row(i);
            m -= row.transpose() * row * curvature;
        }
        m / n as f64
    }

    pub fn mean_score_norm(&self) -> f64 {
        let s = self.scores();
        let n = s.nrows() as f64;
        s.row_sum().norm() / n
    }
}

fn clip(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

fn is_clipped(p: f64, eps: f64) -> bool {
    p <= eps || p >= 1.0 - eps
}

fn raw_probabilities(design: &DMatrix<f64>, coef: &[f64], link: Link) -> Vec<f64> {
    if coef.is_empty() {
        return Vec::new();
    }
    let eta = design * DVector::from_column_slice(coef);
    eta.iter().map(|&e| link.mean(e)).collect()
}

pub(crate) fn check_rank(design: &DMatrix<f64>) -> Result<()> {
    let q = design.ncols();
    if q == 0 {
        return Ok(());
    }
    if design.nrows() < q {
        return Err(Error::SingularDesign(format!("{} rows for {q} columns", design.nrows())));
    }
    // scale columns so the rank test does not depend on units
    let mut scaled = design.clone();
    for mut col in scaled.column_iter_mut() {
        let norm = col.norm();
        if norm == 0.0 {
            return Err(Error::SingularDesign("zero column in design".into()));
        }
        col /= norm;
    }
    let sv = scaled.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 1e-10 * max {
        return Err(Error::SingularDesign(format!("condition ratio {:.3e}", min / max)));
    }
    Ok(())
}

/// Maximizes the Bernoulli likelihood for `P(D = 1 | X)` under `spec`.
///
/// Logit link: Newton/IRLS. Identity link: damped Newton on the likelihood
/// with probabilities projected into `[clip, 1 - clip]`. Non-convergence is
/// reported through `converged = false`, not an error.
pub fn fit_glm(dataset: &Dataset, spec: &DesignSpec) -> Result<PropensityFit> {
    dataset.require_both_arms()?;
    let design = build_design(dataset, spec)?;
    check_rank(&design)?;
    let y: Vec<f64> = dataset.treatments().map(f64::from).collect();
    let (coef, converged, iterations) = match spec.link {
        Link::Logit => irls_logit(&design, &y),
        Link::Identity => newton_identity(&design, &y, spec.clip),
    };
    if !converged {
        warn!("propensity fit {spec} did not converge after {iterations} iterations");
    }
    let probabilities = raw_probabilities(&design, &coef, spec.link)
        .into_iter()
        .map(|p| clip(p, spec.clip))
        .collect();
    Ok(PropensityFit {
        coefficients: coef,
        spec: spec.clone(),
        probabilities,
        converged,
        iterations,
        design,
        treatment: y,
    })
}

fn irls_logit(x: &DMatrix<f64>, y: &[f64]) -> (Vec<f64>, bool, usize) {
    let (n, q) = x.shape();
    let mut beta = DVector::zeros(q);
    for iter in 1..=MAX_ITER {
        let eta = x * &beta;
        let mut xtwx = DMatrix::zeros(q, q);
        let mut grad = DVector::zeros(q);
        for i in 0..n {
            let p = 1.0 / (1.0 + (-eta[i]).exp());
            let w = (p * (1.0 - p)).max(1e-12);
            let row = x.row(i);
            xtwx += row.transpose() * row * w;
            grad += row.transpose() * (y[i] - p);
        }
        let Some(step) = xtwx.lu().solve(&grad) else {
            return (beta.iter().copied().collect(), false, iter);
        };
        beta += &step;
        if beta.iter().any(|b| !b.is_finite() || b.abs() > 1e3) {
            // diverging coefficients: separation
            return (beta.iter().copied().collect(), false, iter);
        }
        if step.amax() < TOLERANCE {
            return (beta.iter().copied().collect(), true, iter);
        }
    }
    (beta.iter().copied().collect(), false, MAX_ITER)
}

fn identity_loglik(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>, eps: f64) -> f64 {
    let eta = x * beta;
    eta.iter()
        .zip(y)
        .map(|(&e, &yi)| {
            let p = clip(e, eps);
            yi * p.ln() + (1.0 - yi) * (1.0 - p).ln()
        })
        .sum()
}

fn newton_identity(x: &DMatrix<f64>, y: &[f64], eps: f64) -> (Vec<f64>, bool, usize) {
    let (n, q) = x.shape();
    // least-squares start
    let xtx = x.transpose() * x;
    let xty = x.transpose() * DVector::from_column_slice(y);
    let mut beta = xtx.lu().solve(&xty).unwrap_or_else(|| DVector::zeros(q));
    let mut ll = identity_loglik(x, y, &beta, eps);
    for iter in 1..=MAX_ITER {
        let eta = x * &beta;
        let mut hess = DMatrix::zeros(q, q);
        let mut grad = DVector::zeros(q);
        for i in 0..n {
            let p = eta[i];
            if is_clipped(p, eps) {
                continue;
            }
            let row = x.row(i);
            grad += row.transpose() * (y[i] / p - (1.0 - y[i]) / (1.0 - p));
            hess += row.transpose() * row * (y[i] / (p * p) + (1.0 - y[i]) / ((1.0 - p) * (1.0 - p)));
        }
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => match hess.lu().solve(&grad) {
                Some(s) => s,
                None => return (beta.iter().copied().collect(), false, iter),
            },
        };
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &beta + &step * scale;
            let cand_ll = identity_loglik(x, y, &candidate, eps);
            if cand_ll >= ll - 1e-12 * ll.abs() {
                let moved = (&step * scale).amax();
                beta = candidate;
                ll = cand_ll;
                accepted = true;
                if moved < TOLERANCE {
                    return (beta.iter().copied().collect(), true, iter);
                }
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            // no ascent direction left: at a (projected) optimum
            return (beta.iter().copied().collect(), grad.amax() < 1e-6 * n as f64, iter);
        }
    }
    (beta.iter().copied().collect(), false, MAX_ITER)
}

/// Hájek-normalized inverse probability weights for arm `d`, aligned with
/// the arm's units in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmWeights {
    pub arm: u8,
    pub indices: Vec<usize>,
    /// Normalized to mean one over the arm.
    pub weights: Vec<f64>,
}

impl ArmWeights {
    /// Unit weights for every member of the arm.
    pub fn uniform(dataset: &Dataset, d: u8) -> Result<Self> {
        let indices = dataset.arm_indices(d);
        if indices.is_empty() {
            return Err(Error::EmptyArm(d));
        }
        let weights = vec![1.0; indices.len()];
        Ok(Self { arm: d, indices, weights })
    }

    pub fn from_probabilities(dataset: &Dataset, probabilities: &[f64], d: u8) -> Result<Self> {
        let indices = dataset.arm_indices(d);
        if indices.is_empty() {
            return Err(Error::EmptyArm(d));
        }
        let raw: Vec<f64> = indices
            .iter()
            .map(|&i| {
                let p = probabilities[i];
                1.0 / if d == 1 { p } else { 1.0 - p }
            })
            .collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let weights = raw.iter().map(|w| w / mean).collect();
        Ok(Self { arm: d, indices, weights })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn sample(&self, dataset: &Dataset) -> Result<WeightedSample> {
        let values = self.indices.iter().map(|&i| dataset.get(i).y).collect();
        WeightedSample::new(values, self.weights.clone())
    }
}

/// IPW-weighted sample of arm `d` outcomes (weights average one).
pub fn ipw_weights(fit: &PropensityFit, dataset: &Dataset, d: u8) -> Result<WeightedSample> {
    arm_weights(fit, dataset, d)?.sample(dataset)
}

pub fn arm_weights(fit: &PropensityFit, dataset: &Dataset, d: u8) -> Result<ArmWeights> {
    if fit.probabilities.len() != dataset.n() {
        return Err(Error::Usage("propensity fit was produced on a different dataset".into()));
    }
    ArmWeights::from_probabilities(dataset, &fit.probabilities, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Observation;

    fn dataset(rows: &[(f64, u8, Vec<f64>)]) -> Dataset {
        Dataset::new(rows.iter().map(|(y, d, x)| Observation { y: *y, d: *d, x: x.clone() }).collect()).unwrap()
    }

    #[test]
    fn design_rows() {
        let ds = dataset(&[(0.0, 1, vec![0.5]), (0.0, 0, vec![0.0])]);
        let m = build_design(&ds, &DesignSpec::polynomial(Link::Logit, &[2])).unwrap();
        assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.5, 0.25]);
        assert_eq!(m.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn design_interaction() {
        let ds = dataset(&[(0.0, 1, vec![2.0, 3.0])]);
        let spec = DesignSpec::polynomial(Link::Logit, &[1, 1]).with_interaction(0, 1);
        let m = build_design(&ds, &spec).unwrap();
        assert_eq!(m.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 3.0, 6.0]);
    }

    #[test]
    fn design_rejects_unknown_covariate() {
        let ds = dataset(&[(0.0, 1, vec![2.0])]);
        let spec = DesignSpec::intercept_only(Link::Logit).with_power(3, 1);
        assert!(matches!(build_design(&ds, &spec), Err(Error::Usage(_))));
    }

    #[test]
    fn parse_basis_orders_columns() {
        let names = vec!["x".to_string(), "z".to_string()];
        let spec = DesignSpec::parse_basis("1, x^2, x*z, z", &names, Link::Identity).unwrap();
        assert!(spec.intercept);
        assert_eq!(spec.powers, vec![(0, 2), (1, 1)]);
        assert_eq!(spec.interactions, vec![(0, 1)]);
        assert!(DesignSpec::parse_basis("1,w", &names, Link::Identity).is_err());
    }

    #[test]
    fn intercept_only_half_treated() {
        let rows: Vec<_> = (0..10).map(|i| (i as f64, (i % 2) as u8, vec![i as f64])).collect();
        let ds = dataset(&rows);
        for link in [Link::Logit, Link::Identity] {
            let fit = fit_glm(&ds, &DesignSpec::intercept_only(link)).unwrap();
            assert!(fit.converged);
            for p in &fit.probabilities {
                assert!((p - 0.5).abs() < 1e-10, "{link:?} {p}");
            }
            let expected = if link == Link::Logit { 0.0 } else { 0.5 };
            assert!((fit.coefficients[0] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_column_is_singular() {
        let rows: Vec<_> = (0..10).map(|i| (0.0, (i % 2) as u8, vec![1.0])).collect();
        let ds = dataset(&rows);
        let err = fit_glm(&ds, &DesignSpec::polynomial(Link::Logit, &[1])).unwrap_err();
        assert!(matches!(err, Error::SingularDesign(_)));
    }

    #[test]
    fn separation_reports_nonconvergence() {
        let rows: Vec<_> = (0..20)
            .map(|i| {
                let x = i as f64 - 9.5;
                (0.0, u8::from(x > 0.0), vec![x])
            })
            .collect();
        let ds = dataset(&rows);
        let fit = fit_glm(&ds, &DesignSpec::polynomial(Link::Logit, &[1])).unwrap();
        assert!(!fit.converged);
        assert!(fit.probabilities.iter().all(|&p| (0.01..=0.99).contains(&p)));
    }

    #[test]
    fn ipw_constant_propensity() {
        let ds = dataset(&[(3.0, 1, vec![]), (1.0, 1, vec![]), (7.0, 0, vec![])]);
        let fit = PropensityFit::constant(&ds, 0.5).unwrap();
        let s = ipw_weights(&fit, &ds, 1).unwrap();
        assert_eq!(s.values(), &[1.0, 3.0]);
        assert_eq!(s.weights(), &[1.0, 1.0]);
    }

    #[test]
    fn ipw_hajek_normalization() {
        let ds = dataset(&[(1.0, 1, vec![]), (2.0, 1, vec![])]);
        let aw = ArmWeights::from_probabilities(&ds, &[0.25, 0.75], 1).unwrap();
        assert!((aw.weights[0] - 1.5).abs() < 1e-12);
        assert!((aw.weights[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ipw_empty_arm() {
        let ds = dataset(&[(1.0, 1, vec![]), (2.0, 1, vec![])]);
        let fit = PropensityFit::constant(&ds, 0.5).unwrap();
        assert_eq!(ipw_weights(&fit, &ds, 0).unwrap_err(), Error::EmptyArm(0));
    }
}
