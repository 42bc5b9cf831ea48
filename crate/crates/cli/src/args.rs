use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "gvr", version, about = "General video recognition over precomputed embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags accepted by every subcommand.
#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Run configuration (JSON); missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed; overrides the configuration file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `paths.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set pretrain.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Accept input artifacts produced under a different configuration.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic embedding bank.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Generator settings (JSON); flags below override it.
        #[arg(long)]
        synth: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        train_per_class: Option<usize>,
        #[arg(long)]
        test_per_class: Option<usize>,
    },
    /// Corpus statistics of a bank.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Build the split files of one benchmark regime.
    BuildSplits {
        #[command(flatten)]
        common: Common,
        /// close, lt, fewshot, cway or open.
        #[arg(long)]
        regime: String,
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Stage I: train the student on a split's training videos.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Choose the salient sentences of every class.
    SelectTexts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        /// Student checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Stage II: train the bi-modal head on a frozen student.
    TrainHead {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        salient: Option<PathBuf>,
    },
    /// Fit a linear probe on student video embeddings.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Evaluate trained artifacts on one regime.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        regime: String,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Split file; for few-shot, the episode list.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        salient: Option<PathBuf>,
        #[arg(long)]
        head: Option<PathBuf>,
    },
    /// Merge evaluation reports into summary tables.
    Report {
        #[command(flatten)]
        common: Common,
        /// Report files written by `eval`.
        #[arg(long = "reports", num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Stats { .. } => "stats",
            Command::BuildSplits { .. } => "build-splits",
            Command::Pretrain { .. } => "pretrain",
            Command::SelectTexts { .. } => "select-texts",
            Command::TrainHead { .. } => "train-head",
            Command::Probe { .. } => "probe",
            Command::Eval { .. } => "eval",
            Command::Report { .. } => "report",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::Stats { common, .. }
            | Command::BuildSplits { common, .. }
            | Command::Pretrain { common, .. }
            | Command::SelectTexts { common, .. }
            | Command::TrainHead { common, .. }
            | Command::Probe { common, .. }
            | Command::Eval { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}
