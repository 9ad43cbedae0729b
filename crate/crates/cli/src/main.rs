use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use fedmid::defense::AGGREGATORS;
use fedmid::harness::{diagnose_divergence, run_seeds, sweep, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedmid", version, about = "Federated poisoning/defense simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default ./runs/<timestamp>-<config hash>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of seed replicas.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Run one experiment per value of a config key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated TOML literals.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Parameter vs. functional divergence of independently trained clients.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the registered aggregator names.
    ListAggregators,
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn default_out(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .context("system clock before 1970")?
        .as_secs();
    Ok(PathBuf::from("runs").join(format!("{stamp}-{}", cfg.hash()?)))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run { config, out, seeds } => {
            let cfg = load(&config)?;
            let dir = match out {
                Some(d) => d,
                None => default_out(&cfg)?,
            };
            for (d, o) in run_seeds(&cfg, seeds, &dir)? {
                println!(
                    "{}: acc {}{}",
                    d.display(),
                    o.summary.display_acc(),
                    o.summary.display_asr().map(|a| format!(", asr {a}")).unwrap_or_default()
                );
            }
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
            seeds,
        } => {
            let cfg = load(&config)?;
            let dir = match out {
                Some(d) => d,
                None => default_out(&cfg)?,
            };
            for (d, o) in sweep(&cfg, &axis, &values, seeds, &dir)? {
                println!(
                    "{}: acc {}{}",
                    d.display(),
                    o.summary.display_acc(),
                    o.summary.display_asr().map(|a| format!(", asr {a}")).unwrap_or_default()
                );
            }
        }
        Command::Diagnose { config, out } => {
            let report = diagnose_divergence(&load(&config)?)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => std::fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
                None => println!("{text}"),
            }
        }
        Command::ListAggregators => {
            for name in AGGREGATORS {
                println!("{name}");
            }
        }
    }
    Ok(())
}
