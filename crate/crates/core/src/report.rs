//! Tabular output: fixed column order, 12 significant digits, provenance
//! embedded as leading comment lines.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::simulation::{Campaign, McResult, SweepPoint};

pub const SIGNIFICANT_DIGITS: usize = 12;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Formats `x` to 12 significant digits: plain notation for exponents in
/// `-5..12`, scientific otherwise; trailing zeros trimmed.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let sign = if negative { "-" } else { "" };
    if !(-5..12).contains(&exp) {
        let m = trim_fraction(&format!("{}.{}", &digits[..1], &digits[1..]));
        return format!("{sign}{m}e{exp}");
    }
    let body = if exp >= 0 {
        let int_len = exp as usize + 1;
        format!("{}.{}", &digits[..int_len], &digits[int_len..])
    } else {
        format!("0.{}{}", "0".repeat((-exp - 1) as usize), digits)
    };
    format!("{sign}{}", trim_fraction(&body))
}

fn trim_fraction(s: &str) -> String {
    if !s.contains('.') {
        return s.to_string();
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_num).unwrap_or_default()
}

/// Provenance header: `# tool <version>` then the config as one JSON line.
pub fn write_provenance<W: Write, C: Serialize>(w: &mut W, config: &C) -> Result<()> {
    let json = serde_json::to_string(config).map_err(|e| Error::Io(e.to_string()))?;
    writeln!(w, "# tiee {VERSION}").map_err(io)?;
    writeln!(w, "# config {json}").map_err(io)?;
    Ok(())
}

fn io(e: impl std::fmt::Display) -> Error {
    Error::Io(e.to_string())
}

pub const CAMPAIGN_COLUMNS: [&str; 19] = [
    "row", "scenario", "method", "regime", "n", "tau", "truth", "rep", "seed", "theta1", "theta0", "delta",
    "ci_lo", "ci_hi", "error", "reps", "failed", "bias", "mse",
];
const COVERAGE_COLUMN: &str = "coverage";

/// Per-replicate rows followed by one aggregate row per method.
pub fn campaign_rows(result: &McResult, label: &str) -> Vec<Vec<String>> {
    let lead = |row: &str| {
        vec![
            row.to_string(),
            label.to_string(),
            result.method.name().to_string(),
            result.regime.name().to_string(),
            result.n.to_string(),
            fmt_num(result.tau),
            fmt_num(result.truth),
        ]
    };
    let mut rows = Vec::with_capacity(result.replicates.len() + 1);
    for r in &result.replicates {
        let mut row = lead("rep");
        row.push(r.index.to_string());
        row.push(r.seed.to_string());
        match &r.outcome {
            Ok(e) => {
                row.extend([fmt_num(e.theta1), fmt_num(e.theta0), fmt_num(e.delta)]);
                row.extend([fmt_opt(e.ci.map(|c| c.0)), fmt_opt(e.ci.map(|c| c.1)), String::new()]);
            }
            Err(kind) => {
                row.extend(std::iter::repeat_n(String::new(), 5));
                row.push(kind.clone());
            }
        }
        row.extend(std::iter::repeat_n(String::new(), 5));
        rows.push(row);
    }
    let mut agg = lead("aggregate");
    agg.extend(std::iter::repeat_n(String::new(), 8));
    agg.push(result.reps.to_string());
    agg.push(result.n_failed().to_string());
    agg.push(fmt_num(result.bias));
    agg.push(fmt_num(result.mse));
    agg.push(fmt_opt(result.coverage));
    rows.push(agg);
    rows
}

fn write_table<W: Write>(w: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().flexible(false).from_writer(w);
    out.write_record(header).map_err(io)?;
    for row in rows {
        out.write_record(row).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Provenance header followed by `rows` under `header`.
pub fn write_table_csv<W: Write, C: Serialize>(mut w: W, config: &C, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_provenance(&mut w, config)?;
    write_table(w, header, rows)
}

pub fn campaign_header() -> Vec<&'static str> {
    let mut h = CAMPAIGN_COLUMNS.to_vec();
    h.push(COVERAGE_COLUMN);
    h
}

/// CSV for one or more labelled results sharing a provenance header.
pub fn write_results_csv<W: Write, C: Serialize>(mut w: W, config: &C, results: &[(String, &McResult)]) -> Result<()> {
    write_provenance(&mut w, config)?;
    let rows: Vec<Vec<String>> = results.iter().flat_map(|(label, r)| campaign_rows(r, label)).collect();
    write_table(w, &campaign_header(), &rows)
}

pub fn write_campaign_csv<W: Write>(w: W, campaign: &Campaign) -> Result<()> {
    let label = campaign.config.scenario.name().to_string();
    let labelled: Vec<(String, &McResult)> = campaign.results.iter().map(|r| (label.clone(), r)).collect();
    write_results_csv(w, &campaign.config, &labelled)
}

pub const SWEEP_COLUMNS: [&str; 7] = ["sweep", "regime", "value", "reps", "failed", "bias", "mse"];

pub fn sweep_rows(sweep: &str, points: &[SweepPoint]) -> Vec<Vec<String>> {
    points
        .iter()
        .map(|p| {
            vec![
                sweep.to_string(),
                p.regime.name().to_string(),
                fmt_num(p.value),
                p.result.reps.to_string(),
                p.result.n_failed().to_string(),
                fmt_num(p.result.bias),
                fmt_num(p.result.mse),
            ]
        })
        .collect()
}

pub fn write_sweep_csv<W: Write, C: Serialize>(w: W, config: &C, sweep: &str, points: &[SweepPoint]) -> Result<()> {
    write_table_csv(w, config, &SWEEP_COLUMNS, &sweep_rows(sweep, points))
}

/// Rows of `table` as JSON objects keyed by `header`, wrapped with the
/// version and config.
pub fn table_json<C: Serialize>(config: &C, header: &[&str], rows: &[Vec<String>]) -> Result<serde_json::Value> {
    let records: Vec<serde_json::Map<String, serde_json::Value>> = rows
        .iter()
        .map(|row| {
            header
                .iter()
                .zip(row)
                .map(|(k, v)| (k.to_string(), serde_json::Value::String(v.clone())))
                .collect()
        })
        .collect();
    Ok(serde_json::json!({
        "tool": "tiee",
        "version": VERSION,
        "config": serde_json::to_value(config).map_err(io)?,
        "columns": header,
        "rows": records,
    }))
}

pub fn results_json<C: Serialize>(config: &C, results: &[(String, &McResult)]) -> Result<serde_json::Value> {
    let rows: Vec<Vec<String>> = results.iter().flat_map(|(label, r)| campaign_rows(r, label)).collect();
    table_json(config, &campaign_header(), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(fmt_num(1.0), "1");
        assert_eq!(fmt_num(-2.5), "-2.5");
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333333");
        assert_eq!(fmt_num(123456.7890123456), "123456.789012");
        assert_eq!(fmt_num(0.000123456789012345), "0.000123456789012");
        assert_eq!(fmt_num(1e-7), "1e-7");
        assert_eq!(fmt_num(9.9999999999999e11), "1e12");
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(100.0), "100");
    }
}
