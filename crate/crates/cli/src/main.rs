//! `msfr` command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod options;

use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use msfr::{MsfrError, Result};
use options::RunConfig;
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "msfr", version, about = "Multi-study factor regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML file with default values for any of the flags below.
    #[arg(long, global = true)]
    config: Option<std::path::PathBuf>,
    #[command(flatten)]
    run: RunConfig,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Draw a synthetic scenario; writes data/ and truth/.
    Simulate,
    /// Fit one model with fixed dimensions.
    Fit,
    /// Fit a grid of dimensions and keep the AIC/BIC minimizer.
    Select,
    /// Factor scores from a parameter directory.
    Score,
    /// K-fold cross-validated prediction error.
    Cv,
    /// Monte Carlo comparison of the four methods.
    Benchmark,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Select => "select",
            Command::Score => "score",
            Command::Cv => "cv",
            Command::Benchmark => "benchmark",
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let base = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let cfg = cli.run.or(base);
    let out = commands::prepare_out(&cfg)?;
    let lines = match cli.command {
        Command::Simulate => commands::simulate(&cfg)?,
        Command::Fit => commands::fit_cmd(&cfg)?,
        Command::Select => commands::select_cmd(&cfg)?,
        Command::Score => commands::score_cmd(&cfg)?,
        Command::Cv => commands::cv_cmd(&cfg)?,
        Command::Benchmark => commands::benchmark_cmd(&cfg)?,
    };
    let record = json!({
        "command": cli.command.name(),
        "config_file": cli.config,
        "config": cfg,
        "seed": cfg.seed(),
        "versions": { "msfr": msfr::VERSION, "msfr-cli": env!("CARGO_PKG_VERSION") },
        "started_unix": started_unix,
        "wall_time_secs": started.elapsed().as_secs_f64(),
    });
    let path = out.join(format!("run_{}.json", cli.command.name()));
    let text = serde_json::to_string_pretty(&record).map_err(|e| MsfrError::Io(e.to_string()))?;
    std::fs::write(&path, text + "\n").map_err(|e| MsfrError::Io(format!("{}: {e}", path.display())))?;
    for l in lines {
        println!("{l}");
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
