//! `bnkit` — train models with interchangeable BatchNorm variants, sweep
//! their robustness to proportional weight noise, compare variants side by
//! side, and estimate SGD gradient noise.
//!
//! Exit codes: 0 success, 2 configuration or validation error, 3 numerical
//! divergence during training.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bnkit::error::Error;
use commands::{GradNoiseArgs, SweepArgs};
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "bnkit", version, about)]
struct Cli {
    /// Cap the worker-thread count. Results never depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config; writes model.bin and train_log.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Noise-sweep a trained model; writes trials.csv, summary.csv and
    /// sweep.json, and prints the average normalized accuracy.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Model file (defaults to <out>/model.bin).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Recompute the summary from an existing trials CSV instead of
        /// evaluating a model.
        #[arg(long)]
        from_trials: Option<PathBuf>,
        /// Baseline accuracy for --from-trials (defaults to the mean of
        /// the eta=0 rows, or 1 when absent).
        #[arg(long)]
        baseline: Option<f64>,
    },
    /// Train and sweep several configs that differ only in their norm
    /// choice; writes compare.csv and prints the table.
    Compare {
        /// Config file per variant (repeat the flag; at least two).
        #[arg(long = "config", required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate the SGD gradient-noise constant and check the batch bound.
    Gradnoise {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run on the built-in closed-form fixture instead of a model.
        #[arg(long, value_parser = ["quadratic"])]
        fixture: Option<String>,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Train { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let out_dir = commands::resolve_out_dir(out.as_deref(), &cfg)?;
            commands::cmd_train(&cfg, &out_dir)
        }
        Command::Sweep {
            config,
            model,
            out,
            seed,
            from_trials,
            baseline,
        } => {
            let cfg = load_config(&config, seed)?;
            let out_dir = commands::resolve_out_dir(out.as_deref(), &cfg)?;
            commands::cmd_sweep(
                &cfg,
                &out_dir,
                &SweepArgs {
                    model,
                    from_trials,
                    baseline,
                },
            )
        }
        Command::Compare { configs, out, seed } => {
            commands::cmd_compare(&configs, out.as_deref(), seed)
        }
        Command::Gradnoise {
            config,
            model,
            out,
            seed,
            fixture,
        } => {
            let cfg = load_config(&config, seed)?;
            let out_dir = commands::resolve_out_dir(out.as_deref(), &cfg)?;
            commands::cmd_gradnoise(
                &cfg,
                &out_dir,
                &GradNoiseArgs {
                    model,
                    fixture: fixture.is_some(),
                },
            )
        }
    }
}

fn setup_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("warning: could not configure {n} threads: {e}");
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        eprintln!("warning: built without the parallel feature; --threads is ignored");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        setup_threads(n);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
