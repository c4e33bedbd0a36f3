//! Observation storage, CSV ingestion and weighted empirical quantiles.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One unit `(y, d, x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: f64,
    pub d: u8,
    pub x: Vec<f64>,
}

/// An ordered sample of observations sharing one covariate dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    observations: Vec<Observation>,
    cov_dim: usize,
}

impl Dataset {
    pub fn new(observations: Vec<Observation>) -> Result<Self> {
        let first = observations
            .first()
            .ok_or_else(|| Error::EmptyInput("dataset has no observations".into()))?;
        let cov_dim = first.x.len();
        for (i, obs) in observations.iter().enumerate() {
            if !obs.y.is_finite() {
                return Err(Error::Parse { row: i + 1, message: format!("outcome {} is not finite", obs.y) });
            }
            if obs.d > 1 {
                return Err(Error::Parse { row: i + 1, message: format!("treatment {} is not 0 or 1", obs.d) });
            }
            if obs.x.len() != cov_dim {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!("expected {cov_dim} covariates, found {}", obs.x.len()),
                });
            }
            if let Some(v) = obs.x.iter().find(|v| !v.is_finite()) {
                return Err(Error::Parse { row: i + 1, message: format!("covariate {v} is not finite") });
            }
        }
        Ok(Self { observations, cov_dim })
    }

    /// Builds a dataset from parallel columns; `x[j]` is the j-th covariate column.
    pub fn from_columns(y: &[f64], d: &[u8], x: &[Vec<f64>]) -> Result<Self> {
        if y.len() != d.len() || x.iter().any(|c| c.len() != y.len()) {
            return Err(Error::Usage("column lengths differ".into()));
        }
        let observations = (0..y.len())
            .map(|i| Observation { y: y[i], d: d[i], x: x.iter().map(|c| c[i]).collect() })
            .collect();
        Self::new(observations)
    }

    pub fn n(&self) -> usize {
        self.observations.len()
    }

    pub fn cov_dim(&self) -> usize {
        self.cov_dim
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn get(&self, i: usize) -> &Observation {
        &self.observations[i]
    }

    pub fn outcomes(&self) -> impl Iterator<Item = f64> + '_ {
        self.observations.iter().map(|o| o.y)
    }

    pub fn treatments(&self) -> impl Iterator<Item = u8> + '_ {
        self.observations.iter().map(|o| o.d)
    }

    /// Indices of the units in arm `d`, in dataset order.
    pub fn arm_indices(&self, d: u8) -> Vec<usize> {
        self.observations
            .iter()
            .enumerate()
            .filter(|(_, o)| o.d == d)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn arm_size(&self, d: u8) -> usize {
        self.observations.iter().filter(|o| o.d == d).count()
    }

    /// Fails with `EmptyArm` unless both arms have at least one unit.
    pub fn require_both_arms(&self) -> Result<()> {
        for d in [0u8, 1] {
            if self.arm_size(d) == 0 {
                return Err(Error::EmptyArm(d));
            }
        }
        Ok(())
    }
}

/// Column names used to read a dataset from CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub y: String,
    pub d: String,
    pub x: Vec<String>,
}

impl ColumnMap {
    pub fn new(y: impl Into<String>, d: impl Into<String>, x: &[&str]) -> Self {
        Self { y: y.into(), d: d.into(), x: x.iter().map(|s| s.to_string()).collect() }
    }
}

/// Reads a headered CSV file. Row indices in errors are 1-based data rows.
pub fn load_csv(path: impl AsRef<Path>, columns: &ColumnMap) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    read_csv(file, columns)
}

pub fn read_csv<R: std::io::Read>(reader: R, columns: &ColumnMap) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Io(e.to_string()))?.clone();
    if headers.is_empty() {
        return Err(Error::EmptyInput("file has no header row".into()));
    }
    let find = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Schema(name.to_string()))
    };
    let y_col = find(&columns.y)?;
    let d_col = find(&columns.d)?;
    let x_cols = columns.x.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let mut observations = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        let cell = |col: usize| record.get(col).unwrap_or("");
        let num = |col: usize, name: &str| -> Result<f64> {
            let raw = cell(col);
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                message: format!("column `{name}`: `{raw}` is not numeric"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, message: format!("column `{name}`: `{raw}` is not finite") });
            }
            Ok(v)
        };
        let y = num(y_col, &columns.y)?;
        let d = match cell(d_col) {
            "0" | "0.0" => 0u8,
            "1" | "1.0" => 1u8,
            other => {
                return Err(Error::Parse {
                    row,
                    message: format!("column `{}`: treatment `{other}` is not 0 or 1", columns.d),
                })
            }
        };
        let x = x_cols
            .iter()
            .zip(&columns.x)
            .map(|(&c, name)| num(c, name))
            .collect::<Result<Vec<_>>>()?;
        observations.push(Observation { y, d, x });
    }
    if observations.is_empty() {
        return Err(Error::EmptyInput("no data rows".into()));
    }
    Dataset::new(observations)
}

/// Sorted values carrying nonnegative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    values: Vec<f64>,
    weights: Vec<f64>,
    total_weight: f64,
}

impl WeightedSample {
    /// Sorts `(value, weight)` pairs by value. Rejects negative or non-finite entries.
    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.len() != weights.len() {
            return Err(Error::Usage("values and weights differ in length".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("sample values must be finite".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Domain("weights must be finite and nonnegative".into()));
        }
        let mut pairs: Vec<(f64, f64)> = values.into_iter().zip(weights).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (values, weights): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let total_weight: f64 = weights.iter().sum();
        if total_weight <= 0.0 {
            return Err(Error::DegenerateWeights);
        }
        Ok(Self { values, weights, total_weight })
    }

    pub fn unweighted(values: Vec<f64>) -> Result<Self> {
        let w = vec![1.0; values.len()];
        Self::new(values, w)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        *self.values.last().expect("weighted sample is nonempty")
    }

    /// Normalized weighted ECDF at `y` (mass of values `<= y`).
    pub fn cdf(&self, y: f64) -> f64 {
        let idx = self.values.partition_point(|&v| v <= y);
        self.weights[..idx].iter().sum::<f64>() / self.total_weight
    }

    /// Left-continuous inverse of the normalized weighted ECDF.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        weighted_quantile(self, p)
    }
}

/// Smallest value whose cumulative normalized weight reaches `p`.
///
/// Ties aggregate before inversion. A relative slack of 1e-12 absorbs
/// rounding in the cumulative sum so that, e.g., four equal weights reach
/// exactly 0.25 at the first value.
pub fn weighted_quantile(sample: &WeightedSample, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("quantile level {p} outside (0, 1)")));
    }
    if sample.total_weight <= 0.0 {
        return Err(Error::DegenerateWeights);
    }
    let target = p * sample.total_weight * (1.0 - 1e-12);
    let mut cum = 0.0;
    let n = sample.values.len();
    let mut i = 0;
    while i < n {
        let v = sample.values[i];
        while i < n && sample.values[i] == v {
            cum += sample.weights[i];
            i += 1;
        }
        if cum >= target {
            return Ok(v);
        }
    }
    Ok(sample.values[n - 1])
}

/// Check loss `rho_p(r) = r (p - 1{r < 0})`.
pub fn check_loss(p: f64, r: f64) -> f64 {
    r * (p - if r < 0.0 { 1.0 } else { 0.0 })
}
