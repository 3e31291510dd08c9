//! `fragmix`: synthetic corpora, binarization, splits, training, descriptor
//! extraction and retrieval evaluation behind one binary.
//!
//! Exit codes: 0 on success, 1 for runtime and data failures, 2 for usage
//! and configuration errors.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use run::{Context, UsageError};

#[derive(Debug, Parser)]
#[command(name = "fragmix", version, about = "Writer and page retrieval for document fragments")]
struct Cli {
    /// Flat key=value file with model., train. and preprocess. sections.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Seed for corpus generation, splits, initialization and batch order.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory receiving every output of the command.
    #[arg(long, global = true, default_value = ".", value_name = "DIR")]
    out_dir: PathBuf,

    /// Worker threads; all cores when unset.
    #[arg(long, global = true, env = "FRAGMIX_THREADS")]
    threads: Option<usize>,

    /// Log progress at info level.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic multi-writer corpus with its manifest.
    Synth(commands::synth::Args),
    /// Binarize images with Sauvola thresholding.
    Binarize(commands::binarize::Args),
    /// Write writer-disjoint k-fold or page-level identification splits.
    Split(commands::split::Args),
    /// Train a model and write checkpoints plus a JSON-lines log.
    Train(commands::train::Args),
    /// Compute descriptors for a manifest with a trained checkpoint.
    Extract(commands::extract::Args),
    /// Leave-one-out writer and page retrieval scores.
    Evaluate(commands::evaluate::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(UsageError::new("--threads must be at least 1").into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let ctx = Context::new(cli.config.as_deref(), cli.seed, cli.out_dir)?;
    match &cli.command {
        Command::Synth(a) => commands::synth::run(&ctx, a),
        Command::Binarize(a) => commands::binarize::run(&ctx, a),
        Command::Split(a) => commands::split::run(&ctx, a),
        Command::Train(a) => commands::train::run(&ctx, a),
        Command::Extract(a) => commands::extract::run(&ctx, a),
        Command::Evaluate(a) => commands::evaluate::run(&ctx, a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<fragmix_core::Error>() {
            return if e.is_config() { 2 } else { 1 };
        }
    }
    1
}
