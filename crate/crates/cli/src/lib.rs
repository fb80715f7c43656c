//! Command-line driver for training, sweeping and analysing early-exit
//! models.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ztw_core::policy::ProbSource;
use ztw_core::{Error, ErrorKind, Result};

use commands::{Ablation, PolicyName};
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "ztw", version, about = "Early-exit training and inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain a backbone, train heads and ensembles, save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated: no-cascade, no-ensemble, no-stopgrad.
        #[arg(long, value_delimiter = ',')]
        ablate: Vec<String>,
    },
    /// Early-exit evaluation at one threshold (or patience for pbee).
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        policy: String,
        #[arg(long)]
        value: f64,
        #[arg(long, default_value = "test")]
        dataset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy and cost over a threshold grid.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        policy: String,
        /// `start:stop:step` ranges and single values, comma-separated.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value = "test")]
        dataset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hindsight improvability per head.
    Hi {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        dataset: String,
        /// heads or ensembles
        #[arg(long, default_value = "heads")]
        source: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Best accuracy within each FLOP budget of a frontier.
    Budget {
        #[arg(long)]
        frontier: PathBuf,
        #[arg(long, default_value = "0.25,0.5,0.75,1.0,max")]
        budgets: String,
        /// Also write the table to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distill a scripted expert into early-exit heads on the grid world.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            ablate,
        } => {
            let mut cfg = load_config(&config, seed)?;
            for a in &ablate {
                Ablation::parse(a)?.apply(&mut cfg);
            }
            let r = commands::train(&cfg, &out)?;
            println!("checkpoint {}", r.checkpoint.display());
            println!("base test accuracy {:.4}", r.base_test_accuracy);
        }
        Command::Evaluate {
            checkpoint,
            policy,
            value,
            dataset,
            out,
        } => {
            let (flops, acc) = commands::evaluate(
                &checkpoint,
                PolicyName::parse(&policy)?,
                value,
                &dataset,
                &out,
            )?;
            println!("mean flops {flops:.1} accuracy {acc:.4}");
        }
        Command::Sweep {
            checkpoint,
            policy,
            grid,
            dataset,
            out,
        } => {
            let points = commands::sweep(
                &checkpoint,
                PolicyName::parse(&policy)?,
                grid.as_deref(),
                &dataset,
                &out,
            )?;
            println!(
                "{} points written to {}",
                points.len(),
                out.join("frontier.csv").display()
            );
        }
        Command::Hi {
            checkpoint,
            dataset,
            source,
            out,
        } => {
            let source = match source.as_str() {
                "heads" => ProbSource::Heads,
                "ensembles" => ProbSource::Ensembles,
                s => {
                    return Err(Error::Config(format!(
                        "unknown source `{s}` (heads or ensembles)"
                    )))
                }
            };
            for (m, v) in commands::hi(&checkpoint, &dataset, source, &out)?
                .iter()
                .enumerate()
            {
                match v {
                    Some(v) => println!("head {} HI {v:.4}", m + 1),
                    None => println!("head {} HI NA", m + 1),
                }
            }
        }
        Command::Budget {
            frontier,
            budgets,
            out,
        } => {
            let table = commands::budget(&frontier, &budgets)?;
            print!("{table}");
            if let Some(path) = out {
                std::fs::write(&path, &table).map_err(|e| Error::Io { path, source: e })?;
            }
        }
        Command::Distill { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let r = commands::distill(&cfg, &out)?;
            for p in &r.points {
                println!(
                    "tau {} return {:.3} ± {:.3} flops/step {:.1}",
                    p.tau, p.mean_return, p.std_return, p.mean_step_flops
                );
            }
        }
    }
    Ok(())
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

/// Caps the worker pool from `ZTW_THREADS` (0 or unset = automatic).
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("ZTW_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| {
        Error::Config(format!(
            "ZTW_THREADS must be a non-negative integer, got `{v}`"
        ))
    })?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))?;
    }
    Ok(())
}
