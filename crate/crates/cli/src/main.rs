//! `omnisched`: run scheduling, communication, attention and reliability
//! scenarios from JSON configs.

mod commands;
mod config;
mod error;
mod output;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::RunOptions;
use config::Scenario;
use error::CliError;
use output::Format;

#[derive(Debug, Parser)]
#[command(name = "omnisched", version, about = "Training-step, collective and reliability scenarios for multimodal DiT clusters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scenario config (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write a Chrome trace (default).
    #[arg(long, global = true, overrides_with = "no_trace")]
    trace: bool,
    #[arg(long, global = true, overrides_with = "trace")]
    no_trace: bool,
    #[arg(long, global = true, value_enum, default_value = "both")]
    format: Format,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Simulate one training step: report, metrics and trace.
    Simulate,
    /// Microbatches, Ulysses plans and DP balance.
    Balance,
    /// Direct versus two-tier all-to-all plans.
    Comms,
    /// Window and KV-cache accounting for a latent grid.
    AttnReport,
    /// ETTR table and mtbf threshold.
    Reliability,
    /// Run another command over a parameter grid.
    Sweep,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Balance => "balance",
            Command::Comms => "comms",
            Command::AttnReport => "attn-report",
            Command::Reliability => "reliability",
            Command::Sweep => "sweep",
        }
    }
}

fn run(cli: &Cli) -> Result<i32, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Validation("--config: required".into()))?;
    let sc = Scenario::load(path, cli.seed)?;
    let out = commands::output_dir(&sc, cli.out.as_deref())?;
    let ro = RunOptions { format: cli.format, trace: !cli.no_trace };
    log::info!("{} with config {} (sha256 {})", cli.command.name(), path.display(), sc.hash);
    if let Command::Sweep = cli.command {
        return sweep::run(&sc, &out, ro);
    }
    let outcome = commands::run_named(cli.command.name(), &sc, ro)?;
    outcome.artifacts.write_all(&out)?;
    for (name, _) in &outcome.artifacts.files {
        println!("{}", out.join(name).display());
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("OMNISCHED_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
