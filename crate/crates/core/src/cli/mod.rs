//! Command-line driver: one subcommand per experiment.

mod commands;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocols::ProtocolKind;
use crate::report::{Format, Report};

pub use commands::execute;

pub const DEFAULT_SEED: u64 = 1;

const EXIT_CODES: &str = "\
Exit codes:
  0   all embedded checks passed
  1   runtime error
  2   usage or configuration error
  10  lattice-table: analytic values do not match the published rows
  11  straddle: a boundary produced no mixed witness (or the control mixed)
  12  bilateral-vs-naive: the bilateral protocol ended in a mixed state
  13  adamw-skew: observed moment skew off by more than 1e-12
  14  deploy: a consensus deploy ran a mixed collective

Configuration: --config FILE reads a JSON object. Top-level keys set global
options and subcommand parameters (snake_case flag names); an object under
the subcommand name overrides those. Flags given on the command line win.";

#[derive(Debug, Parser)]
#[command(name = "epochal", version, about = "Checkpoint and deploy atomicity experiments", after_help = EXIT_CODES)]
pub struct Cli {
    /// Master seed (default 1).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,

    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Pr[atomic] for the published (q, n) rows, with Monte-Carlo columns.
    LatticeTable(LatticeArgs),
    /// Mixed-state witnesses over a grid of boundary times.
    Straddle(StraddleArgs),
    /// Naive and bilateral checkpoints under identical crash injection.
    BilateralVsNaive(CompareArgs),
    /// One-epoch moment skew check and trajectory divergence.
    AdamwSkew(SkewArgs),
    /// Retry attempts under load amplification.
    Retry(RetryArgs),
    /// Naive versus consensus firmware deploy.
    Deploy(DeployArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::LatticeTable(_) => "lattice-table",
            Command::Straddle(_) => "straddle",
            Command::BilateralVsNaive(_) => "bilateral-vs-naive",
            Command::AdamwSkew(_) => "adamw-skew",
            Command::Retry(_) => "retry",
            Command::Deploy(_) => "deploy",
        }
    }
}

/// Accepts plain integers and integral scientific notation (`1e6`).
fn parse_count(s: &str) -> Result<u64, String> {
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    match s.parse::<f64>() {
        Ok(x) if x >= 0.0 && x.fract() == 0.0 && x <= 9.007_199_254_740_992e15 => Ok(x as u64),
        _ => Err(format!("`{s}` is not a non-negative integer")),
    }
}

mod count {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<u64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_u64(*x),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
        let v = Option::<serde_json::Number>::deserialize(d)?;
        v.map(|n| {
            n.as_u64()
                .or_else(|| n.as_f64().filter(|x| *x >= 0.0 && x.fract() == 0.0).map(|x| x as u64))
                .ok_or_else(|| serde::de::Error::custom(format!("{n} is not a non-negative integer")))
        })
        .transpose()
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct LatticeArgs {
    /// Per-unit commit probability (single custom row; needs --n).
    #[arg(long)]
    pub q: Option<f64>,
    /// Unit count for the custom row.
    #[arg(long)]
    pub n: Option<u64>,
    /// P(unit reverts to e−1); turns on the ternary bounds.
    #[arg(long)]
    pub p: Option<f64>,
    /// Monte-Carlo trials per row; 0 disables the column (default 1e4).
    #[arg(long, value_parser = parse_count)]
    #[serde(with = "count")]
    pub trials: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct StraddleArgs {
    /// Components (≥ 2, default 2).
    #[arg(long)]
    pub n: Option<usize>,
    /// Boundary times to try (default 100).
    #[arg(long, value_parser = parse_count)]
    #[serde(with = "count")]
    pub grid: Option<u64>,
    /// Largest boundary time drawn (default 10000).
    #[arg(long, value_parser = parse_count)]
    #[serde(with = "count")]
    pub t_max: Option<u64>,
    /// Negative control: no crash at the boundary.
    #[arg(long, num_args = 0, default_missing_value = "true")]
    pub no_crash: Option<bool>,
    /// Print the first witness event by event.
    #[arg(long, num_args = 0, default_missing_value = "true")]
    pub narrative: Option<bool>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareArgs {
    /// Components (default 8).
    #[arg(long)]
    pub n: Option<usize>,
    /// Seeded runs per protocol (default 1e4).
    #[arg(long, value_parser = parse_count)]
    #[serde(with = "count")]
    pub runs: Option<u64>,
    /// Per-component crash probability (default 0.001).
    #[arg(long)]
    pub crash_prob: Option<f64>,
    /// Replace every k-th run with a straddling schedule plus boundary crash.
    #[arg(long, value_parser = parse_count)]
    #[serde(with = "count")]
    pub adversarial_every: Option<u64>,
    /// Naive boundary time (default 40).
    #[arg(long, value_parser = parse_count)]
    #[serde(with = "count")]
    pub boundary: Option<u64>,
    /// Bilateral ack timeout (default 100).
    #[arg(long, value_parser = parse_count)]
    #[serde(with = "count")]
    pub ack_timeout: Option<u64>,
    /// Message and stage delays are uniform in 1..=delay_max (default 10).
    #[arg(long, value_parser = parse_count)]
    #[serde(with = "count")]
    pub delay_max: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SkewArgs {
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Gradient whose moment write is lost (default 1.0).
    #[arg(long)]
    pub g: Option<f64>,
    /// Parameter dimension (default 1).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Steps in the divergence series (default 50).
    #[arg(long, value_parser = parse_count)]
    #[serde(with = "count")]
    pub horizon: Option<u64>,
    /// Epoch at which the stale moment is restored (default 1).
    #[arg(long, value_parser = parse_count)]
    #[serde(with = "count")]
    pub skew_epoch: Option<u64>,
    /// Quadratic curvature of the first coordinate (default 1.0).
    #[arg(long)]
    pub curvature: Option<f64>,
    /// Starting weight (default 1.0).
    #[arg(long)]
    pub w0: Option<f64>,
    /// Gradient noise scale (default 0).
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InnerKind {
    #[default]
    Bilateral,
    Naive,
}

impl From<InnerKind> for ProtocolKind {
    fn from(k: InnerKind) -> Self {
        match k {
            InnerKind::Bilateral => ProtocolKind::Bilateral,
            InnerKind::Naive => ProtocolKind::Naive,
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryArgs {
    /// Base per-component failure probability (default 0.1).
    #[arg(long)]
    pub p0: Option<f64>,
    /// Components (default 10).
    #[arg(long)]
    pub n: Option<usize>,
    /// Amplification factors, comma separated (default 1,1.25,1.5).
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    /// Retry loops per alpha (default 1e4).
    #[arg(long, value_parser = parse_count)]
    #[serde(with = "count")]
    pub runs: Option<u64>,
    /// Attempts before giving up (default 50).
    #[arg(long)]
    pub max_attempts: Option<u32>,
    #[arg(long, value_enum)]
    pub protocol: Option<InnerKind>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct DeployArgs {
    /// Fleet sizes, comma separated (default 2,16).
    #[arg(long, value_delimiter = ',')]
    pub nodes: Option<Vec<usize>>,
    /// Schedules per fleet size (default 1e4).
    #[arg(long, value_parser = parse_count)]
    #[serde(with = "count")]
    pub budget: Option<u64>,
    /// Per-node crash probability in random schedules (default 0.2).
    #[arg(long)]
    pub crash_prob: Option<f64>,
    /// Abort a collective when anyone is fenced instead of shrinking it.
    #[arg(long, num_args = 0, default_missing_value = "true")]
    pub fence_abort: Option<bool>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

/// Global options after merging flags over the config file.
#[derive(Debug, Clone, Copy)]
pub struct Globals {
    pub seed: u64,
    pub format: Format,
}

fn overlay<T: Serialize + DeserializeOwned>(flags: &T, base: &serde_json::Map<String, serde_json::Value>) -> Result<T, CliError> {
    let mut merged = base.clone();
    if let serde_json::Value::Object(m) = serde_json::to_value(flags).expect("args serialize") {
        merged.extend(m.into_iter().filter(|(_, v)| !v.is_null()));
    }
    serde_json::from_value(serde_json::Value::Object(merged)).map_err(|e| CliError::Usage(format!("config: {e}")))
}

fn load_config(path: &PathBuf, command: &str) -> Result<serde_json::Map<String, serde_json::Value>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let serde_json::Value::Object(mut map) = value else {
        return Err(CliError::Usage(format!("{}: expected a JSON object", path.display())));
    };
    if let Some(serde_json::Value::Object(nested)) = map.remove(command) {
        map.extend(nested);
    }
    Ok(map)
}

/// Resolves the config file into concrete globals and subcommand arguments.
pub fn resolve(cli: &Cli) -> Result<(Globals, Command), CliError> {
    let base = match &cli.config {
        Some(p) => load_config(p, cli.command.name())?,
        None => Default::default(),
    };
    #[derive(Serialize, Deserialize, Default)]
    #[serde(default)]
    struct G {
        seed: Option<u64>,
        format: Option<Format>,
    }
    let g = overlay(
        &G {
            seed: cli.seed,
            format: cli.format,
        },
        &base,
    )?;
    let globals = Globals {
        seed: g.seed.unwrap_or(DEFAULT_SEED),
        format: g.format.unwrap_or_default(),
    };
    let command = match &cli.command {
        Command::LatticeTable(a) => Command::LatticeTable(overlay(a, &base)?),
        Command::Straddle(a) => Command::Straddle(overlay(a, &base)?),
        Command::BilateralVsNaive(a) => Command::BilateralVsNaive(overlay(a, &base)?),
        Command::AdamwSkew(a) => Command::AdamwSkew(overlay(a, &base)?),
        Command::Retry(a) => Command::Retry(overlay(a, &base)?),
        Command::Deploy(a) => Command::Deploy(overlay(a, &base)?),
    };
    Ok((globals, command))
}

/// Parses `args`, runs the command and returns (rendered output, exit code).
pub fn run_to_string<I, T>(args: I) -> Result<(String, i32), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string()))?;
    let (globals, command) = resolve(&cli)?;
    let report: Report = execute(&command, globals.seed)?;
    let code = report.failed.map_or(0, |f| f.exit_code());
    Ok((report.render(globals.format), code))
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = resolve(&cli).and_then(|(g, command)| Ok((g, execute(&command, g.seed)?)));
    match result {
        Ok((g, report)) => {
            print!("{}", report.render(g.format));
            report.failed.map_or(0, |f| f.exit_code())
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
