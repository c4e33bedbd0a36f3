//! Large-sample Monte Carlo approximation of the true treatment effect.

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::dgp::Scenario;
use super::rng::{derive_seed, open_uniform, stream_rng};

/// Number of independent blocks behind the standard error.
pub const ORACLE_BLOCKS: usize = 20;
/// Smallest accepted oracle sample.
pub const MIN_ORACLE_DRAWS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleEstimate {
    pub tau: f64,
    pub theta1: f64,
    pub theta0: f64,
    pub delta: f64,
    /// Block standard error of `delta`.
    pub se: f64,
    pub n_mc: usize,
}

impl OracleEstimate {
    /// `delta +- 1.96 se`.
    pub fn band95(&self) -> (f64, f64) {
        (self.delta - 1.96 * self.se, self.delta + 1.96 * self.se)
    }
}

/// Difference of empirical `tau`-quantiles of `n_mc` potential-outcome
/// pairs of `scenario` (no treatment masking).
pub fn true_eqte_oracle(scenario: Scenario, tau: f64, n_mc: usize, seed: u64) -> Result<OracleEstimate> {
    oracle_from_sampler(tau, n_mc, seed, |rng| {
        let x = 2.0 * open_uniform(rng) - 1.0;
        scenario.outcomes(x, rng)
    })
}

/// Oracle for an arbitrary pair sampler.
pub fn oracle_from_sampler<F>(tau: f64, n_mc: usize, seed: u64, sampler: F) -> Result<OracleEstimate>
where
    F: Fn(&mut ChaCha8Rng) -> (f64, f64) + Sync,
{
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Domain(format!("tau {tau} outside (0, 1)")));
    }
    if n_mc < MIN_ORACLE_DRAWS {
        return Err(Error::TooFewObservations { needed: MIN_ORACLE_DRAWS, got: n_mc });
    }
    // pooled rank counted from the top; every block keeps that many of its largest values
    let top = n_mc - order_index(tau, n_mc);
    let blocks: Vec<Block> = (0..ORACLE_BLOCKS)
        .into_par_iter()
        .map(|b| {
            let size = n_mc / ORACLE_BLOCKS + usize::from(b < n_mc % ORACLE_BLOCKS);
            let mut rng = stream_rng(derive_seed(seed, b as u64), 0);
            let (mut y1, mut y0): (Vec<f64>, Vec<f64>) = (0..size).map(|_| sampler(&mut rng)).unzip();
            let k = order_index(tau, size);
            let q1 = select(&mut y1, k);
            let q0 = select(&mut y0, k);
            Block { q1, q0, top1: largest(y1, top), top0: largest(y0, top) }
        })
        .collect();

    let pooled = |pick: fn(&Block) -> &Vec<f64>| {
        let mut all: Vec<f64> = blocks.iter().flat_map(|b| pick(b).iter().copied()).collect();
        let len = all.len();
        select(&mut all, len - top)
    };
    let theta1 = pooled(|b| &b.top1);
    let theta0 = pooled(|b| &b.top0);

    let deltas: Vec<f64> = blocks.iter().map(|b| b.q1 - b.q0).collect();
    let m = deltas.iter().sum::<f64>() / ORACLE_BLOCKS as f64;
    let var = deltas.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (ORACLE_BLOCKS - 1) as f64;
    let se = (var / ORACLE_BLOCKS as f64).sqrt();
    Ok(OracleEstimate { tau, theta1, theta0, delta: theta1 - theta0, se, n_mc })
}

struct Block {
    q1: f64,
    q0: f64,
    top1: Vec<f64>,
    top0: Vec<f64>,
}

/// Zero-based order statistic of the left-continuous empirical quantile.
fn order_index(tau: f64, n: usize) -> usize {
    let k = (tau * n as f64 * (1.0 - 1e-12)).ceil() as usize;
    k.clamp(1, n) - 1
}

fn select(values: &mut [f64], k: usize) -> f64 {
    let (_, v, _) = values.select_nth_unstable_by(k, f64::total_cmp);
    *v
}

fn largest(mut values: Vec<f64>, count: usize) -> Vec<f64> {
    if count >= values.len() {
        return values;
    }
    let cut = values.len() - count;
    values.select_nth_unstable_by(cut, f64::total_cmp);
    values.split_off(cut)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_effect_is_zero() {
        let o = oracle_from_sampler(0.5, MIN_ORACLE_DRAWS, 4, |rng| {
            let v = open_uniform(rng);
            (v, v)
        })
        .unwrap();
        assert_eq!(o.delta, 0.0);
        assert!((o.theta1 - 0.5).abs() < 0.002);
    }

    #[test]
    fn pooled_matches_full_sort() {
        let o = oracle_from_sampler(0.999, MIN_ORACLE_DRAWS, 8, |rng| (open_uniform(rng), 0.0)).unwrap();
        let mut all = Vec::new();
        for b in 0..ORACLE_BLOCKS {
            let size = MIN_ORACLE_DRAWS / ORACLE_BLOCKS;
            let mut rng = stream_rng(derive_seed(8, b as u64), 0);
            all.extend((0..size).map(|_| open_uniform(&mut rng)));
        }
        all.sort_by(f64::total_cmp);
        assert_eq!(o.theta1, all[order_index(0.999, all.len())]);
    }

    #[test]
    fn too_small() {
        assert!(true_eqte_oracle(Scenario::M1H, 0.9, 1000, 1).is_err());
    }
}
