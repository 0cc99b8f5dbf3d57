use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ssd_lab::config::ExperimentConfig;
use ssd_lab::{construction1, simulate, sweep, verify, CommandOutput};

#[derive(Parser)]
#[command(
    name = "ssd-lab",
    version,
    about = "Speculative-speculative decoding experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; defaults to the config's `out`, then stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// One CSV row per replication and mode.
    Simulate(Common),
    /// Miss rate and speed against fan-out, and uniform vs geometric budgets.
    SweepFanout(Common),
    /// Hit and acceptance rates across down-weighting factors.
    SweepC(Common),
    /// Slow and fast backup speculators across batch sizes.
    SweepBatch(Common),
    /// Exact or Monte-Carlo check that SSD samples from the target.
    VerifyLossless(Common),
    /// Exact report on the four-token down-weighting example.
    Construction1 {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run_with_config(
    c: &Common,
    f: fn(&ssd_lab::config::Prepared) -> Result<CommandOutput>,
) -> Result<(CommandOutput, Option<PathBuf>)> {
    let mut config = ExperimentConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        config.seed = seed;
    }
    let out_path = c.out.clone().or_else(|| config.out.clone());
    let prepared = config.prepare().context("invalid config")?;
    Ok((f(&prepared)?, out_path))
}

fn run(cli: Cli) -> Result<bool> {
    let (output, out_path) = match &cli.command {
        Command::Simulate(c) => run_with_config(c, simulate::cmd_simulate)?,
        Command::SweepFanout(c) => run_with_config(c, sweep::cmd_sweep_fanout)?,
        Command::SweepC(c) => run_with_config(c, sweep::cmd_sweep_c)?,
        Command::SweepBatch(c) => run_with_config(c, sweep::cmd_sweep_batch)?,
        Command::VerifyLossless(c) => run_with_config(c, verify::cmd_verify_lossless)?,
        Command::Construction1 { out, .. } => (construction1::cmd_construction1()?, out.clone()),
    };
    match out_path {
        Some(path) => std::fs::write(&path, &output.body)
            .with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(output.body.as_bytes())?,
    }
    for note in &output.notes {
        eprintln!("{note}");
    }
    if !output.pass {
        eprintln!("check failed");
    }
    Ok(output.pass)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
