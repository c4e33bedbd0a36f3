use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use tiee::report::{table_json, write_table_csv, VERSION};

use crate::{Format, RunConfig};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_ESTIMATION: u8 = 3;
pub const ERROR_FILE: &str = "error.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// A failed run: exit code plus the machine-readable error object.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub kind: String,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, kind: "usage".into(), message: message.into() }
    }

    /// Caller-input problems map to 2, everything else to 3.
    pub fn from_core(e: tiee::Error) -> Self {
        let code = if e.is_input_error() { EXIT_USAGE } else { EXIT_ESTIMATION };
        Self { code, kind: e.kind().into(), message: e.to_string() }
    }

    /// Any error while reading the user's data is an input error.
    pub fn input(e: tiee::Error) -> Self {
        Self { code: EXIT_USAGE, kind: e.kind().into(), message: e.to_string() }
    }

    pub fn io(e: anyhow::Error) -> Self {
        Self { code: EXIT_USAGE, kind: "io".into(), message: format!("{e:#}") }
    }
}

pub fn write_error(dir: &Path, failure: &Failure, config: &serde_json::Value) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let body = serde_json::json!({
        "tool": "tiee",
        "version": VERSION,
        "exit_code": failure.code,
        "kind": failure.kind,
        "message": failure.message,
        "config": config,
    });
    let path = dir.join(ERROR_FILE);
    fs::write(&path, serde_json::to_string_pretty(&body)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Writes `stem.csv` or `stem.json` under `dir` and returns its path.
pub fn write_table<C: Serialize>(
    dir: &Path,
    stem: &str,
    format: Format,
    config: &C,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<PathBuf, crate::Failure> {
    let run = || -> anyhow::Result<PathBuf> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        match format {
            Format::Csv => {
                let path = dir.join(format!("{stem}.csv"));
                let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                write_table_csv(BufWriter::new(file), config, header, rows)?;
                Ok(path)
            }
            Format::Json => {
                let path = dir.join(format!("{stem}.json"));
                let value = table_json(config, header, rows)?;
                fs::write(&path, serde_json::to_string_pretty(&value)? + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
                Ok(path)
            }
        }
    };
    run().map_err(Failure::io)
}

/// Manifest: version, resolved config, result files and run-specific extras.
pub fn write_manifest(
    dir: &Path,
    config: &RunConfig,
    files: &[PathBuf],
    extra: serde_json::Value,
) -> Result<(), Failure> {
    let run = || -> anyhow::Result<()> {
        let names: Vec<String> =
            files.iter().filter_map(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()).collect();
        let body = serde_json::json!({
            "tool": "tiee",
            "version": VERSION,
            "config": serde_json::to_value(config)?,
            "files": names,
            "threads": config.threads,
            "run": extra,
        });
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&body)? + "\n").with_context(|| format!("writing {}", path.display()))
    };
    run().map_err(Failure::io)
}

/// Whitespace-aligned table for standard output.
pub fn print_summary(header: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ")
    };
    println!("{}", line(header.to_vec()));
    for row in rows {
        println!("{}", line(row.iter().map(String::as_str).collect()));
    }
}
