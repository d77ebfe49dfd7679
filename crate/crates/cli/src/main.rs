use std::path::PathBuf;

use anyhow::{Context, Result};
use cgnp_cli::{commands, RunConfig};
use clap::{Parser, Subcommand};

/// Train and compare conditional neural processes on Gaussian-process data.
#[derive(Debug, Parser)]
#[command(name = "cgnp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured test set as a JSONL episode file.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `key=value` settings applied after the config file.
        overrides: Vec<String>,
    },
    /// Train one model; writes checkpoint.json, loss.csv and metrics.csv.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on an episode file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the record as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the plain, graph and zero-radius graph models over several
    /// seeds and tabulate test metrics.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        overrides: Vec<String>,
    },
    /// Dump the predictive mean and deviation over one episode as CSV.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(config: Option<&PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    RunConfig::load(config.map(|p| p.as_path()), overrides).context("loading configuration")
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate { config, out, overrides } => {
            let cfg = load(config.as_ref(), &overrides)?;
            let g = commands::generate(&cfg, &out)?;
            println!("wrote {} episodes to {} sha256={}", g.episodes, g.path.display(), g.sha256);
        }
        Command::Train { config, out_dir, overrides } => {
            let cfg = load(config.as_ref(), &overrides)?;
            let t = commands::train(&cfg, &out_dir, |line| println!("{line}"))?;
            let m = t.report.final_metrics;
            println!(
                "holdout nll_per_point={} mse={} wall_seconds={:.1}",
                m.nll_per_point, m.mse, t.report.wall_seconds
            );
            if let Some((m, sha)) = t.test {
                println!("test nll_per_point={} mse={} sha256={sha}", m.nll_per_point, m.mse);
            }
        }
        Command::Eval { checkpoint, data, out } => {
            let e = commands::eval(&checkpoint, &data, out.as_deref())?;
            println!("{}", e.record);
        }
        Command::Compare { config, seeds, out, overrides } => {
            let cfg = load(config.as_ref(), &overrides)?;
            let c = commands::compare(&cfg, seeds, &out, |line| println!("{line}"))?;
            print!("{}", c.table);
        }
        Command::Plot { checkpoint, data, index, out } => {
            let n = commands::plot(&checkpoint, &data, index, &out)?;
            println!("wrote {n} rows to {}", out.display());
        }
    }
    Ok(())
}
