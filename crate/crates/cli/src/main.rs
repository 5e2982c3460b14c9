//! `cappa`: data generation, training, evaluation, probing and scoring.
//!
//! Exit codes: 0 success, 1 internal error, 2 missing artifact, 3 bad input.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Internal(String),
    Missing(String),
    BadInput(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Missing(_) => 2,
            CliError::BadInput(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Internal(m) | CliError::Missing(m) | CliError::BadInput(m) => m,
        }
    }
}

impl From<cappa_core::Error> for CliError {
    fn from(e: cappa_core::Error) -> Self {
        use cappa_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Missing(msg),
            E::Oov(_)
            | E::Length { .. }
            | E::Vocab(_)
            | E::Format(_)
            | E::Version { .. }
            | E::Config(_)
            | E::BatchTooSmall(_)
            | E::InsufficientShots { .. }
            | E::CountMismatch(..)
            | E::Perturb(_) => CliError::BadInput(msg),
            E::Shape(_) | E::EmptyLoss | E::Diverged(_) | E::Io(_) => CliError::Internal(msg),
        }
    }
}

#[derive(Parser)]
#[command(name = "cappa", version, about = "Captioning and contrastive pretraining on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint and metrics CSV.
    Train(TrainArgs),
    /// Perturbation benchmark (and retrieval for contrastive models).
    Eval(EvalArgs),
    /// k-shot probes on frozen encoder features.
    Probe(ProbeArgs),
    /// Score candidate captions for one image.
    Score(ScoreArgs),
}

/// Options shared by every command.
#[derive(Args)]
pub struct Common {
    /// Config file of `key=value` lines (`#` comments).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of examples.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Uniform pixel noise amplitude.
    #[arg(long)]
    pub noise: Option<f32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset file from gen-data.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metrics CSV (default: `<out>.metrics.csv`).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Start from the parameters of this checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Continue this checkpoint's run (parameters, optimizer and step).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// cap, cappa or clip.
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub parallel_fraction: Option<f64>,
    #[arg(long)]
    pub reverse_prob: Option<f64>,
    /// none, encoder, decoder_except_xattn or encoder_and_decoder_except_xattn.
    #[arg(long)]
    pub freeze: Option<String>,
    #[arg(long)]
    pub dec_layers: Option<usize>,
    /// Tie the decoder output projection to its input embedding.
    #[arg(long)]
    pub share_embeddings: bool,
    #[arg(long)]
    pub dec_biases: bool,
    /// Re-draw decoder cross-attention weights before training.
    #[arg(long)]
    pub reinit_xattn: bool,
    /// Replace image features by zeros (language-only training).
    #[arg(long)]
    pub blind: bool,
    /// example or batch.
    #[arg(long)]
    pub mixing: Option<String>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use only the first n examples (0: all).
    #[arg(long)]
    pub n: Option<usize>,
    /// Comma-separated perturbation kinds.
    #[arg(long)]
    pub kinds: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Perturbation report CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// A separately trained blind captioner for the blind row.
    #[arg(long)]
    pub blind_ckpt: Option<PathBuf>,
    /// Retrieval CSV (contrastive checkpoints).
    #[arg(long)]
    pub retrieval_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training examples per class.
    #[arg(long)]
    pub k: Option<usize>,
    /// linear, mlp, map or all.
    #[arg(long)]
    pub kind: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Dataset to take the image from (with --index).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<usize>,
    /// Image file (PNG or PPM) instead of --data/--index.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Candidate caption; repeatable.
    #[arg(long = "caption")]
    pub captions: Vec<String>,
    /// causal or parallel.
    #[arg(long)]
    pub mode: Option<String>,
    /// Score with the image replaced by zeros.
    #[arg(long)]
    pub blind: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(3);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Probe(a) => commands::probe(a),
        Command::Score(a) => commands::score(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
