use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How grid levels are laid out on `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// `p_k = k/K`, `k = 1..K`.
    Uniform,
    /// Uniform on `(0, p_u]`, geometric in tail probability above `p_u`,
    /// with the target level placed exactly on the grid.
    #[default]
    TailCalibrated,
}

impl std::str::FromStr for GridKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "tail" | "tail_calibrated" => Ok(Self::TailCalibrated),
            other => Err(Error::Usage(format!("unknown grid kind `{other}`"))),
        }
    }
}

pub const MIN_GRID_SIZE: usize = 100;

/// `K = 800` for `n <= 1000`, else `2000`.
pub fn default_grid_size(n: usize) -> usize {
    if n <= 1000 {
        800
    } else {
        2000
    }
}

/// Increasing levels `p_1 < ... < p_K` with `p_0 = 0` implicit.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    levels: Vec<f64>,
}

impl Grid {
    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Usage("grid must have at least one level".into()));
        }
        let mut prev = 0.0;
        for &p in &levels {
            if !(p > prev && p <= 1.0) {
                return Err(Error::Domain("grid levels must increase within (0, 1]".into()));
            }
            prev = p;
        }
        Ok(Self { levels })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Usage("grid size must be positive".into()));
        }
        Self::from_levels((1..=k).map(|i| i as f64 / k as f64).collect())
    }

    /// `K_b = round(K p_u)` uniform body levels and `K - K_b` tail levels whose
    /// tail probabilities run geometrically from `1 - p_u` down to `(1 - tau)/10`.
    pub fn tail_calibrated(k: usize, p_u: f64, tau: f64) -> Result<Self> {
        if !(p_u > 0.0 && p_u < 1.0) || !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Domain("p_u and tau must lie in (0, 1)".into()));
        }
        if k < 4 {
            return Err(Error::Usage(format!("grid size {k} too small")));
        }
        let k_body = ((k as f64 * p_u).round() as usize).clamp(1, k - 2);
        let k_tail = k - k_body;
        let mut levels: Vec<f64> = (1..=k_body).map(|i| p_u * i as f64 / k_body as f64).collect();
        let top = 1.0 - p_u;
        let tails = if tau > p_u {
            let target = 1.0 - tau;
            let bottom = target / 10.0;
            let frac = (top / target).ln() / (top / bottom).ln();
            let j = ((k_tail as f64 * frac).round() as usize).clamp(1, k_tail - 1);
            let mut t = geometric(top, target, j);
            t.extend(geometric(target, bottom, k_tail - j));
            t
        } else {
            geometric(top, top / 10.0, k_tail)
        };
        levels.extend(tails.into_iter().map(|t| 1.0 - t));
        Self::from_levels(levels)
    }

    pub fn build(kind: GridKind, k: usize, p_u: f64, tau: f64) -> Result<Self> {
        match kind {
            GridKind::Uniform => Self::uniform(k),
            GridKind::TailCalibrated => Self::tail_calibrated(k, p_u, tau),
        }
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn last(&self) -> f64 {
        *self.levels.last().expect("grid is nonempty")
    }

    /// `(p_k, p_k - p_{k-1})` pairs.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        let mut prev = 0.0;
        self.levels.iter().map(move |&p| {
            let dp = p - prev;
            prev = p;
            (p, dp)
        })
    }

    /// Smallest grid level `>= tau` (with a relative slack of 1e-12).
    pub fn round_up(&self, tau: f64) -> Option<f64> {
        let target = tau * (1.0 - 1e-12);
        self.levels.iter().copied().find(|&p| p >= target)
    }
}

/// `steps` tail probabilities strictly below `from`, ending exactly at `to`.
fn geometric(from: f64, to: f64, steps: usize) -> Vec<f64> {
    let ratio = (to / from).ln() / steps as f64;
    (1..=steps)
        .map(|i| if i == steps { to } else { from * (ratio * i as f64).exp() })
        .collect()
}
