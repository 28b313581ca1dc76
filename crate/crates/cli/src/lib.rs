//! Command-line driver for the timed-translation toolkit.
//!
//! Subcommands cover the full loop: `gen-data` writes a synthetic corpus,
//! `train` fits a checkpoint, `translate` decodes with beam search, and
//! `evaluate` scores BLEU and speech overlap. `repro-trend` chains all of
//! them for a timed-vs-baseline comparison.
//!
//! Exit codes: 0 success, 1 I/O or parse failure, 2 configuration or
//! validation failure, 3 numeric failure during training.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod error;
pub mod manifest;

pub use error::{exit_code, CliError};

#[derive(Debug, Parser)]
#[command(
    name = "isochron",
    about = "Duration-aware speech-to-text translation on a synthetic timing-annotated corpus",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/dev/test corpus files and the vocabulary
    GenData(GenDataArgs),
    /// Train a checkpoint on a generated corpus
    Train(TrainArgs),
    /// Decode a corpus file with a trained checkpoint
    Translate(TranslateArgs),
    /// Score a decoded file against its corpus
    Evaluate(EvaluateArgs),
    /// Full comparison run: generate, train timed and baseline models,
    /// decode, and evaluate both
    ReproTrend(ReproTrendArgs),
}

#[derive(Debug, clap::Args)]
pub struct GenDataArgs {
    /// Output directory for the corpus files
    #[arg(long)]
    pub out: PathBuf,
    /// Corpus configuration (key = value lines; `seed` is required)
    #[arg(long)]
    pub config: PathBuf,
    /// Override the seed from the configuration file
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Directory produced by gen-data
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model_config: PathBuf,
    #[arg(long)]
    pub train_config: PathBuf,
    /// Checkpoint output path
    #[arg(long)]
    pub out: PathBuf,
    /// Zero the duration/remaining-frames/pause embeddings (plain
    /// sequence-to-sequence baseline with identical parameter count)
    #[arg(long)]
    pub ablate_timing: bool,
    /// Override the training config's duration-input noise
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Resume from an earlier checkpoint that carries optimizer state
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this absolute step count (the checkpoint stays resumable)
    #[arg(long)]
    pub halt_step: Option<u64>,
}

#[derive(Debug, clap::Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Corpus file to decode
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    /// Decoded output path
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary file; defaults to vocab.txt next to the data file
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, default_value_t = 0.6)]
    pub length_norm_alpha: f64,
    /// Force <eos> once the remaining-frames bookkeeping reaches zero
    #[arg(long)]
    pub force_eos_at_zero: bool,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    /// Decoded file from translate
    #[arg(long)]
    pub hyp: PathBuf,
    /// Corpus file the decode ran on
    #[arg(long)]
    pub data: PathBuf,
    /// Per-utterance report output (TSV)
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct ReproTrendArgs {
    /// Working directory for all produced artifacts
    #[arg(long)]
    pub out: PathBuf,
    /// Corpus configuration file
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub model_config: PathBuf,
    #[arg(long)]
    pub train_config: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => commands::gen_data::run(&args),
        Command::Train(args) => commands::train::run(&args),
        Command::Translate(args) => commands::translate::run(&args),
        Command::Evaluate(args) => commands::evaluate::run(&args),
        Command::ReproTrend(args) => commands::repro_trend::run(&args),
    }
}
