//! `clce`: train, evaluate, sweep, diagnose and gradient-check CLCE models.
//!
//! Exit codes: 0 success, 2 configuration error, 3 divergence, 4 insufficient
//! or degenerate data, 5 verification failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clce_core::gradcheck::DEFAULT_STEP;
use clce_core::{Error, ErrorKind};

use crate::commands::Context;
use crate::config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "clce", version, about = "CLCE experiment driver")]
struct Cli {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 0 runs single-threaded.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and write a checkpoint and loss history.
    Train,
    /// Episodic few-shot evaluation of a checkpoint on the evaluation split.
    EvalFewshot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        way: Option<usize>,
        #[arg(long)]
        shot: Option<usize>,
        #[arg(long)]
        query: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Also write one CSV row per episode.
        #[arg(long)]
        per_episode: bool,
    },
    /// Train and evaluate every (arm, lambda, batch size, seed) cell.
    Sweep,
    /// Cosine histograms, isotropy and a 2-D projection of a checkpoint's embeddings.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        target_class: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients over a seeded grid.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_STEP)]
        h: f64,
        /// Batch sizes to check instead of the default grid's.
        #[arg(long, value_delimiter = ',')]
        batch_sizes: Vec<usize>,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 5,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Divergence => 3,
                ErrorKind::InsufficientData => 4,
                ErrorKind::Other => match e {
                    Error::CorruptCheckpoint(_) | Error::Shape(_) | Error::InvalidBatch(_) | Error::Index { .. } => 2,
                    _ => 4,
                },
            },
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    let seed = config.seeds[0];
    let write_gradcheck = cli.out.is_some();
    let out = cli.out.clone().unwrap_or_else(|| config.output_dir.clone());

    if let Command::EvalFewshot {
        way,
        shot,
        query,
        episodes,
        ..
    } = &cli.command
    {
        let f = &mut config.fewshot;
        f.way = way.unwrap_or(f.way);
        f.shot = shot.unwrap_or(f.shot);
        f.query = query.unwrap_or(f.query);
        f.episodes = episodes.unwrap_or(f.episodes);
        config.validate()?;
    }

    let ctx = Context {
        config,
        out,
        threads: cli.threads,
    };
    match &cli.command {
        Command::Train => commands::train_cmd(&ctx, seed)?,
        Command::EvalFewshot {
            checkpoint,
            per_episode,
            ..
        } => commands::eval_fewshot_cmd(&ctx, checkpoint, seed, *per_episode)?,
        Command::Sweep => commands::sweep_cmd(&ctx, &ctx.config.seeds)?,
        Command::Diagnose {
            checkpoint,
            target_class,
        } => {
            let class = target_class.unwrap_or(ctx.config.diagnose.target_class);
            commands::diagnose_cmd(&ctx, checkpoint, class, seed)?
        }
        Command::Gradcheck {
            h,
            batch_sizes,
            corrupt_gradient,
        } => {
            let seed = cli.seed.unwrap_or(0);
            commands::gradcheck_cmd(&ctx, seed, *h, batch_sizes, *corrupt_gradient, write_gradcheck)?
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
