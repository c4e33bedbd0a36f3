mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use output::Failure;

#[derive(Parser, Debug)]
#[command(name = "tiee", version, about = "Extreme quantile treatment effects via tail-calibrated inverse estimating equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the effect on an observational CSV.
    Estimate(RunArgs),
    /// Monte Carlo campaign on a simulation scenario.
    Simulate(RunArgs),
    /// MSE curves over the threshold level or the grid size.
    Sensitivity(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Estimate(_) => "estimate",
            Command::Simulate(_) => "simulate",
            Command::Sensitivity(_) => "sensitivity",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Estimate(a) | Command::Simulate(a) | Command::Sensitivity(a) => a,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct RunArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Outcome column.
    #[arg(long)]
    pub y: Option<String>,
    /// Binary treatment column.
    #[arg(long)]
    pub d: Option<String>,
    /// Covariate column (repeatable).
    #[arg(long = "x")]
    pub x: Vec<String>,
    /// Target quantile level.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Tail regime: 5_over_n, 1_over_n or 5_over_nlogn (all three when omitted).
    #[arg(long)]
    pub regime: Option<String>,
    /// Simulation scenario, e.g. M1H.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Estimator (repeatable): tiee, zhang_firpo, causal_hill, pickands.
    #[arg(long = "method")]
    pub method: Vec<String>,
    /// Threshold level override.
    #[arg(long)]
    pub pu: Option<f64>,
    /// Grid size override.
    #[arg(long = "grid-k")]
    pub grid_k: Option<usize>,
    #[arg(long, default_value_t = 0.10)]
    pub alpha: f64,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "tiee-out")]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Named study; `misspec` runs the propensity robustness table.
    #[arg(long)]
    pub study: Option<String>,
    /// Sensitivity axis: pu or k.
    #[arg(long)]
    pub sweep: Option<String>,
    /// Propensity link: logit or identity.
    #[arg(long)]
    pub link: Option<String>,
    /// Propensity basis, e.g. `1,x,x^2,x*z`.
    #[arg(long)]
    pub basis: Option<String>,
    /// Simulated sample size.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Draws behind the Monte Carlo truth.
    #[arg(long = "oracle-draws", default_value_t = tiee::simulation::DEFAULT_ORACLE_DRAWS)]
    pub oracle_draws: usize,
    /// Bootstrap resamples for Zhang-Firpo intervals (0 skips them).
    #[arg(long, default_value_t = 500)]
    pub bootstrap: usize,
}

/// Everything that determines a run, embedded in every output.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub command: &'static str,
    #[serde(flatten)]
    pub args: RunArgs,
    /// Worker cap; results do not depend on it.
    #[serde(skip)]
    pub threads: Option<usize>,
}

fn threads_from_env() -> Result<Option<usize>, Failure> {
    match std::env::var("TIEE_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(t) if t > 0 => Ok(Some(t)),
            _ => Err(Failure::usage(format!("TIEE_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

/// Best-effort `--out` recovery when argument parsing itself failed.
fn out_from_raw_args() -> Option<PathBuf> {
    let args: Vec<String> = std::env::args().collect();
    args.iter().enumerate().find_map(|(i, a)| {
        if a == "--out" {
            args.get(i + 1).map(PathBuf::from)
        } else {
            a.strip_prefix("--out=").map(PathBuf::from)
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                if let Some(dir) = out_from_raw_args() {
                    let failure = Failure::usage(e.kind().to_string());
                    let _ = output::write_error(&dir, &failure, &serde_json::Value::Null);
                }
            }
            return ExitCode::from(code as u8);
        }
    };
    let command = cli.command.name();
    let args = cli.command.args().clone();
    let out = args.out.clone();
    let threads = match threads_from_env() {
        Ok(t) => t,
        Err(f) => return fail(&out, &f, &serde_json::json!({ "command": command })),
    };
    let config = RunConfig { command, args, threads };
    let run = || match &cli.command {
        Command::Estimate(_) => commands::estimate(&config),
        Command::Simulate(_) => commands::simulate(&config),
        Command::Sensitivity(_) => commands::sensitivity(&config),
    };
    let result = tiee::simulation::with_threads(threads, run).map_err(Failure::from_core).and_then(|r| r);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(&out, &f, &serde_json::to_value(&config).unwrap_or_default()),
    }
}

fn fail(out: &std::path::Path, failure: &Failure, config: &serde_json::Value) -> ExitCode {
    eprintln!("error: {}", failure.message);
    if let Err(e) = output::write_error(out, failure, config) {
        eprintln!("error: could not write error object: {e:#}");
    }
    ExitCode::from(failure.code)
}
