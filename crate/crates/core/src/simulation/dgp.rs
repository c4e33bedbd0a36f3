//! Data-generating processes for the heavy- and light-tailed scenarios.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{Dataset, Observation};
use crate::error::{Error, Result};

use super::rng::{open_uniform, stream_rng};

const STREAM_X: u64 = 0;
const STREAM_D: u64 = 1;
const STREAM_Y: u64 = 2;
const STREAM_Z: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scenario {
    M1H,
    M2H,
    M3H,
    M1L,
    M2L,
    M3L,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [Self::M1H, Self::M2H, Self::M3H, Self::M1L, Self::M2L, Self::M3L];
    pub const HEAVY: [Scenario; 3] = [Self::M1H, Self::M2H, Self::M3H];
    pub const LIGHT: [Scenario; 3] = [Self::M1L, Self::M2L, Self::M3L];

    pub fn name(self) -> &'static str {
        match self {
            Self::M1H => "M1H",
            Self::M2H => "M2H",
            Self::M3H => "M3H",
            Self::M1L => "M1L",
            Self::M2L => "M2L",
            Self::M3L => "M3L",
        }
    }

    pub fn is_heavy(self) -> bool {
        matches!(self, Self::M1H | Self::M2H | Self::M3H)
    }

    /// Potential outcomes `(Y1, Y0)` at covariate `x` from independent uniforms.
    pub fn outcomes<R: RngCore>(self, x: f64, rng: &mut R) -> (f64, f64) {
        let v = open_uniform(rng);
        match self {
            Self::M1H => {
                let s = student_t3_quantile(v) * (1.0 + x);
                (5.0 * s, s)
            }
            Self::M1L => {
                let s = Normal::standard().inverse_cdf(v) * (1.0 + x);
                (5.0 * s, s)
            }
            Self::M2H => {
                let w = open_uniform(rng);
                (frechet(v, 2.0) * x.exp(), frechet(w, 3.0) * x.exp())
            }
            Self::M2L => {
                let w = open_uniform(rng);
                (exponential(v, 1.0) * x.exp(), exponential(w, 2.0) * x.exp())
            }
            Self::M3H => (pareto(v, 1.75 + x, 2.0), pareto(v, 1.75 + x, 1.0)),
            Self::M3L => (weibull(v, 2.0 + x, 2.0), weibull(v, 3.0 + 2.0 * x, 1.0)),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|sc| sc.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Usage(format!("unknown scenario `{s}` (expected one of M1H, M2H, M3H, M1L, M2L, M3L)")))
    }
}

/// Student-t (3 df) quantile. With `t = sqrt(3) tan s` the cdf is
/// `1/2 + (s + sin(2s)/2) / pi`, inverted by safeguarded Newton in `s`.
pub fn student_t3_quantile(p: f64) -> f64 {
    let target = PI * (p - 0.5);
    let (mut lo, mut hi) = (-FRAC_PI_2, FRAC_PI_2);
    let mut s = target / 2.0;
    for _ in 0..100 {
        let f = s + (2.0 * s).sin() / 2.0 - target;
        if f > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        let d = 2.0 * s.cos().powi(2);
        let mut next = s - f / d;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - s).abs() <= 1e-15 * s.abs().max(1e-300) {
            s = next;
            break;
        }
        s = next;
    }
    3f64.sqrt() * s.tan()
}

/// Student-t (3 df) cdf.
pub fn student_t3_cdf(t: f64) -> f64 {
    let s = (t / 3f64.sqrt()).atan();
    0.5 + (s + (2.0 * s).sin() / 2.0) / PI
}

pub fn frechet(v: f64, shape: f64) -> f64 {
    (-v.ln()).powf(-1.0 / shape)
}

pub fn exponential(v: f64, rate: f64) -> f64 {
    -v.ln() / rate
}

pub fn pareto(v: f64, shape: f64, scale: f64) -> f64 {
    scale * v.powf(-1.0 / shape)
}

pub fn weibull(v: f64, shape: f64, scale: f64) -> f64 {
    scale * (-v.ln()).powf(1.0 / shape)
}

/// True propensity `0.5 x^2 + 0.25`.
pub fn true_propensity(x: f64) -> f64 {
    0.5 * x * x + 0.25
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub scenario: Scenario,
    pub n: usize,
    pub seed: u64,
    /// Append an independent Uniform(-1, 1) noise covariate `z`.
    pub spurious: bool,
}

impl DgpSpec {
    pub fn new(scenario: Scenario, n: usize, seed: u64) -> Self {
        Self { scenario, n, seed, spurious: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialOutcomes {
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
}

/// Draws covariates, treatments and both potential outcomes; `Y = Y_D`.
/// Each component uses its own stream, so the noise covariate leaves the
/// rest of the sample unchanged.
pub fn generate(spec: &DgpSpec) -> Result<(Dataset, PotentialOutcomes)> {
    if spec.n < 100 {
        return Err(Error::TooFewObservations { needed: 100, got: spec.n });
    }
    let mut rx = stream_rng(spec.seed, STREAM_X);
    let mut rd = stream_rng(spec.seed, STREAM_D);
    let mut ry = stream_rng(spec.seed, STREAM_Y);
    let mut rz = stream_rng(spec.seed, STREAM_Z);
    let mut obs = Vec::with_capacity(spec.n);
    let mut po = PotentialOutcomes { y1: Vec::with_capacity(spec.n), y0: Vec::with_capacity(spec.n) };
    for _ in 0..spec.n {
        let x = 2.0 * open_uniform(&mut rx) - 1.0;
        let d = u8::from(open_uniform(&mut rd) < true_propensity(x));
        let (y1, y0) = spec.scenario.outcomes(x, &mut ry);
        let mut cov = vec![x];
        if spec.spurious {
            cov.push(2.0 * open_uniform(&mut rz) - 1.0);
        }
        obs.push(Observation { y: if d == 1 { y1 } else { y0 }, d, x: cov });
        po.y1.push(y1);
        po.y0.push(y0);
    }
    Ok((Dataset::new(obs)?, po))
}
