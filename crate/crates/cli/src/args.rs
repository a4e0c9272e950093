//! Command-line surface.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use clozevar::LossMode;

use crate::settings::List;

#[derive(Debug, Parser)]
#[command(name = "clozevar", version, about = "Train tiny language models on human next-word variability and measure how well they reproduce it")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a cloze dataset by passage and train the tokenizer.
    Prepare(PrepareArgs),
    /// Train one model per seed in the chosen mode.
    Train(TrainArgs),
    /// Compare sampled model distributions with human annotations.
    Eval(EvalArgs),
    /// Train and evaluate multi-label models on k labels per context.
    Ablate(AblateArgs),
    /// Hit rates on single-answer questions.
    ProbeQa(ProbeArgs),
    /// Generate a synthetic world with known next-word distributions.
    Synth(SynthArgs),
    /// Per-context TVD changes between two evaluation reports.
    Report(ReportArgs),
}

/// Training mode; `base` writes the untrained initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Mode {
    Base,
    OrigCorpus,
    MajorityLabel,
    MultiLabel,
    InstructionAugmented,
}

impl Mode {
    pub fn loss_mode(self) -> Option<LossMode> {
        match self {
            Mode::Base => None,
            Mode::OrigCorpus => Some(LossMode::OrigCorpus),
            Mode::MajorityLabel => Some(LossMode::MajorityLabel),
            Mode::MultiLabel => Some(LossMode::MultiLabel),
            Mode::InstructionAugmented => Some(LossMode::InstructionAugmented),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.to_possible_value().expect("no skipped variants");
        f.write_str(v.get_name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        <Mode as ValueEnum>::from_str(s, false)
    }
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Cloze dataset (JSON Lines).
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Number of tokenizer merges.
    #[arg(long)]
    pub merges: Option<usize>,
    /// Probe questions whose text should also be covered by the tokenizer.
    #[arg(long)]
    pub qa: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Model and optimizer settings shared by `train` and `ablate`.
#[derive(Debug, Args, Default)]
pub struct HyperArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Comma-separated seeds, one model per seed.
    #[arg(long)]
    pub seeds: Option<List<u64>>,
    /// Condition every mode on the instruction prompt.
    #[arg(long)]
    pub prompted: bool,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Context window in tokens.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Flat key=value file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Keep k labels per context, sampled without replacement.
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub hyper: HyperArgs,
}

/// Monte-Carlo sampling settings.
#[derive(Debug, Args, Default)]
pub struct SampleArgs {
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Token budget per sampled word.
    #[arg(long)]
    pub max_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A checkpoint file or a directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test JSONL file, or a prepared directory (its test.jsonl is used).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Defaults to tokenizer.json next to the checkpoint.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate only these checkpoint seeds.
    #[arg(long)]
    pub seeds: Option<List<u64>>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[command(flatten)]
    pub sample: SampleArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Evaluation file; defaults to the prepared test split.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Labels per context to try.
    #[arg(long)]
    pub k: Option<List<usize>>,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[command(flatten)]
    pub sample: SampleArgs,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL with `context` and `target` fields.
    #[arg(long)]
    pub qa: PathBuf,
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seeds: Option<List<u64>>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Earlier hits.csv to compare against.
    #[arg(long)]
    pub before: Option<PathBuf>,
    #[command(flatten)]
    pub sample: SampleArgs,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub contexts: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Dirichlet concentration; small is near-deterministic.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Annotations per context.
    #[arg(long)]
    pub m: Option<usize>,
    /// World seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Seed of the training annotations; held-out annotations use the next one.
    #[arg(long)]
    pub annotation_seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub before: PathBuf,
    #[arg(long)]
    pub after: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}
