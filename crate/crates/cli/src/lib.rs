//! Command-line driver for data generation, training, evaluation, sweeps and
//! cost-map inspection.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use nap_core::expert::SeedRange;

use crate::commands::Context;
use crate::config::{ConfigFile, MethodChoice, Overrides, ResolvedConfig};
pub use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "nap",
    version,
    about = "Neuro-algorithmic policies on a moving-box grid world"
)]
pub struct Cli {
    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Training seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory. Defaults to `runs/<config-hash>-<unix-time>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for evaluation and batch computations.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and test expert datasets.
    GenData,
    /// Train NAP and/or behaviour cloning.
    Train {
        /// Training dataset (JSONL). Generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: Option<MethodChoice>,
    },
    /// Evaluate a checkpoint on held-out levels.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the planning oracle instead of a checkpoint.
        #[arg(long)]
        oracle: bool,
        /// Give NAP the true start and goal vertices.
        #[arg(long)]
        nap_star: bool,
        /// Seed range as `START:END`.
        #[arg(long, value_parser = parse_seed_range)]
        seeds: Option<SeedRange>,
    },
    /// Level-count or horizon sweep as set in the `[sweep]` section.
    Sweep,
    /// Dump predicted and true cost maps and the plan for one level.
    Inspect {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        level_seed: u64,
        /// Time step along the expert rollout.
        #[arg(long, default_value_t = 0)]
        t: usize,
    },
}

fn parse_seed_range(s: &str) -> Result<SeedRange, String> {
    let (a, b) = s.split_once(':').ok_or("expected START:END")?;
    let start: u64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let end: u64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if start >= end {
        return Err("seed range must be nonempty".into());
    }
    Ok(SeedRange::new(start, end))
}

fn load_config(cli: &Cli) -> CliResult<ResolvedConfig> {
    let file = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            ConfigFile::parse(&text)?
        }
        None => ConfigFile::default(),
    };
    let mut overrides = Overrides {
        seed: cli.seed,
        ..Overrides::default()
    };
    match &cli.command {
        Command::Train { method, .. } => overrides.method = *method,
        Command::Eval {
            nap_star, seeds, ..
        } => {
            overrides.nap_star = nap_star.then_some(true);
            overrides.eval_seeds = *seeds;
        }
        _ => {}
    }
    ResolvedConfig::resolve(&file, &overrides)
}

/// Runs one command and returns its run directory.
pub fn run(cli: &Cli) -> CliResult<PathBuf> {
    if let Some(n) = cli.threads {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    let config = load_config(cli)?;
    let out = cli.out.clone().unwrap_or_else(|| {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        PathBuf::from("runs").join(format!("{}-{secs}", &config.hash()[..12]))
    });
    let ctx = Context { config, out };
    match &cli.command {
        Command::GenData => commands::gen_data(&ctx)?,
        Command::Train { data, .. } => commands::train(&ctx, data.as_deref())?,
        Command::Eval {
            checkpoint, oracle, ..
        } => {
            commands::eval(&ctx, checkpoint.as_deref(), *oracle)?;
        }
        Command::Sweep => commands::sweep(&ctx)?,
        Command::Inspect {
            checkpoint,
            oracle,
            level_seed,
            t,
        } => {
            commands::inspect(&ctx, checkpoint.as_deref(), *oracle, *level_seed, *t)?;
        }
    }
    Ok(ctx.out)
}
