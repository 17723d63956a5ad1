//! `pit`: generate corpora, train PIT and baseline models, score and dump.

mod commands;
mod config;
mod dump;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pit_core::eval::ScoreMode;
use pit_core::trainer::ClipMode;

#[derive(Debug, Parser)]
#[command(name = "pit", version, about = "Permutation-invariant training for multi-talker acoustic models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a two-talker corpus with clean companions.
    GenCorpus(GenCorpusArgs),
    /// Train a multi-head model with the PIT loss on mixtures.
    Train(TrainArgs),
    /// Train a single-head model on clean utterances.
    TrainBaseline(TrainArgs),
    /// Score a checkpoint on a corpus split and print a CSV report.
    Eval(EvalArgs),
    /// Finite-difference check of the PIT gradient on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Write a spectrogram image and per-frame posteriors for one utterance.
    Dump(DumpArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for all derived randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for generation, minibatch gradients and scoring.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct GenCorpusArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of training mixtures.
    #[arg(long)]
    train: Option<usize>,
    /// Number of evaluation mixtures.
    #[arg(long)]
    eval: Option<usize>,
    /// Size of the speaker pool.
    #[arg(long)]
    speakers: Option<usize>,
    /// Comma-separated SNR conditions in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    snrs: Option<Vec<f64>>,
    /// Number of senones including silence.
    #[arg(long)]
    senones: Option<usize>,
    /// Shortest source utterance in frames.
    #[arg(long)]
    min_frames: Option<usize>,
    /// Longest source utterance in frames.
    #[arg(long)]
    max_frames: Option<usize>,
}

fn parse_clip_mode(s: &str) -> Result<ClipMode, String> {
    match s {
        "element" => Ok(ClipMode::Element),
        "norm" => Ok(ClipMode::Norm),
        other => Err(format!("expected element or norm, got {other:?}")),
    }
}

fn parse_score_mode(s: &str) -> Result<ScoreMode, String> {
    s.parse().map_err(|e: pit_core::Error| e.to_string())
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Corpus directory written by gen-corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory for checkpoints, train.log and config.resolved.
    #[arg(long)]
    out: PathBuf,
    /// SGD learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Gradient clipping threshold.
    #[arg(long)]
    clip: Option<f64>,
    /// Clipping semantics: element or norm.
    #[arg(long, value_parser = parse_clip_mode)]
    clip_mode: Option<ClipMode>,
    /// Utterances per minibatch.
    #[arg(long)]
    minibatch: Option<usize>,
    /// Maximum number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// LSTM cells per direction.
    #[arg(long)]
    hidden: Option<usize>,
    /// Number of BLSTM layers.
    #[arg(long)]
    layers: Option<usize>,
    /// Output streams (train only; the baseline always has one).
    #[arg(long)]
    streams: Option<usize>,
    /// Share of the training split held out for the learning-rate schedule.
    #[arg(long)]
    heldout_fraction: Option<f64>,
    /// Stop after the epoch that crosses this wall-clock budget (seconds).
    #[arg(long)]
    time_budget: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to score.
    #[arg(long)]
    model: PathBuf,
    /// Corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// pit, single-on-mix or single-on-clean.
    #[arg(long, value_parser = parse_score_mode, default_value = "pit")]
    mode: ScoreMode,
    /// Split to score; defaults to eval, or eval_clean for single-on-clean.
    #[arg(long)]
    split: Option<String>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Seed for parameters, features and targets.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DumpArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    /// Utterance id as listed in the manifest, e.g. eval-00003.
    #[arg(long)]
    utterance: String,
    /// Checkpoint for posteriors; without it only labels are written.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PIT_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
