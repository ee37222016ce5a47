//! Command-line driver for `fbe-core`. Each subcommand is one reproducible workflow
//! with deterministic CSV or JSON output.

// `!(x > 0.0)` style checks are deliberate: they reject NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod table;
pub mod verify;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use config::{load_config, parse_config, ExperimentConfig, LoadedConfig};
pub use error::CliError;
use table::emit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "fbe", version, about = "Fine-grained Carnot bounds for finite baths")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Worker threads for independent runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Seed for the random-matrix invariant suites.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Also write long-format CSV (model, lambda, quantity, value) for plotting.
    #[arg(long, global = true)]
    pub emit_plot_data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Second-order coefficient table.
    Coeffs,
    /// First- and second-order bounds for each scale.
    Bound,
    /// Optimal protocol runs, one row per (model, scale).
    Protocol,
    /// Scaling fits of the work deficit and relative entropy.
    Sweep,
    /// Invariant suites; exits with code 4 on any failure.
    Verify,
}

fn required(cli: &Cli) -> Result<LoadedConfig, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    load_config(path)
}

fn render(cli: &Cli, out: &commands::CommandOutput) -> Result<Vec<u8>, CliError> {
    match cli.format {
        Format::Csv => out.table.to_csv(),
        Format::Json => {
            let v = out.report.clone().unwrap_or_else(|| out.table.to_json_value());
            let mut s = serde_json::to_string_pretty(&v).map_err(|e| CliError::Output(e.to_string()))?;
            s.push('\n');
            Ok(s.into_bytes())
        }
    }
}

/// Run one invocation. Output is written before any run-level failure is returned.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    pool.install(|| run_inner(cli))
}

fn run_inner(cli: &Cli) -> Result<(), CliError> {
    let cfg = match (cli.command, &cli.config) {
        (Command::Verify, None) => None,
        _ => Some(required(cli)?),
    };
    let out = match cli.command {
        Command::Coeffs => commands::coeffs(cfg.as_ref().unwrap())?,
        Command::Bound => commands::bound(cfg.as_ref().unwrap())?,
        Command::Protocol => commands::protocol(cfg.as_ref().unwrap())?,
        Command::Sweep => commands::sweep(cfg.as_ref().unwrap())?,
        Command::Verify => {
            let results = verify::run_suites(cfg.as_ref(), cli.seed);
            let hash = cfg.as_ref().map_or("none", |c| c.hash.as_str());
            let failed: Vec<String> =
                results.iter().filter(|r| !r.passed()).map(|r| format!("{} ({})", r.suite, r.subject)).collect();
            let failure = (!failed.is_empty()).then(|| CliError::Invariant(failed.join(", ")));
            commands::CommandOutput { table: verify::table(&results, hash), report: None, plot: None, failure }
        }
    };
    let path = cli.out.clone().or_else(|| cfg.as_ref().and_then(|c| c.config.output.clone().map(PathBuf::from)));
    emit(&render(cli, &out)?, path.as_deref())?;
    if let Some(p) = &cli.emit_plot_data {
        let plot = out.plot.as_ref().unwrap_or(&out.table);
        emit(&plot.to_csv()?, Some(p))?;
    }
    out.failure.map_or(Ok(()), Err)
}
