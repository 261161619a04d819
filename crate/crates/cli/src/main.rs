//! `tbg`: batch runner for synthetic data, prompt and embedding ingestion,
//! semantic edges, training, evaluation and robustness protocols.
//!
//! Exit codes: 0 success, 1 runtime failure (error JSON on stderr),
//! 2 usage error.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

pub const BUILD_ID: &str = env!("TBG_BUILD_ID");

#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub message: String,
}

impl CliError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self { code: code.into(), message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl From<tbg_core::Error> for CliError {
    fn from(e: tbg_core::Error) -> Self {
        Self::new(e.code(), e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "tbg", version, about = "Text-bridged graph recommendation pipeline")]
pub struct Cli {
    /// Experiment configuration (JSON); every field has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `paths.output`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct Overrides {
    /// Seed for training and synthetic data generation
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Semantic-edge threshold; in fine-tuning commands it sets the
    /// fine-tuning threshold.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Adam learning rate
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Propagation depth
    #[arg(long, global = true)]
    pub layers: Option<usize>,
    /// Epoch budget for pre-training, fine-tuning and scratch training.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    PretrainCrossDomain,
    FinetuneSrcTgt,
    FinetuneTgtGlobal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    GammaSweep,
    Masking,
    ColdStart,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-domain interaction log and text matrix.
    Synth,
    /// Build per-node prompts from the training split.
    Prompts,
    /// Embed prompts with the configured provider.
    Embed,
    /// Build semantic edges for one or all modes.
    Edges {
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Pre-train on the source domains.
    Pretrain,
    /// Fine-tune a pre-trained checkpoint on the target domain.
    Finetune {
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Training-free target inference from a pre-trained checkpoint.
    Zeroshot {
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Train the target domain alone.
    Scratch,
    /// Evaluate a checkpoint.
    Eval {
        /// Checkpoint file to score
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Report hit rate instead of per-user recall.
        #[arg(long)]
        hit_rate: bool,
    },
    /// Run a robustness protocol.
    Protocol {
        #[arg(value_enum)]
        name: ProtocolArg,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": { "code": e.code, "message": e.message } }));
            ExitCode::from(1)
        }
    }
}
