//! Command-line driver: corpus generation, seed and fine-tune training,
//! decoding, evaluation and ablation reports.

pub mod commands;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxasr::encoder::ConsumptionMode;
use ctxasr::eval::ContextMode;
use ctxasr::text::ContextGenerator;
use ctxasr::train::Regime;
use serde::{Deserialize, Serialize};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Divergence(m) => write!(f, "training diverged: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<ctxasr::Error> for CliError {
    fn from(e: ctxasr::Error) -> Self {
        match e {
            ctxasr::Error::Divergence { .. } => CliError::Divergence(e.to_string()),
            ctxasr::Error::Config(_) | ctxasr::Error::ModeMismatch(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "ctxasr", version, about = "Context-prompted streaming transducer ASR on synthetic sessions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic train/dev/test corpus.
    GenData(GenDataArgs),
    /// Train a seed model or fine-tune a variant from one.
    Train(TrainArgs),
    /// Greedy-decode a split and print hypotheses.
    Decode(DecodeArgs),
    /// Score a split and write an evaluation record.
    Eval(EvalArgs),
    /// Compare evaluation records against a baseline.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 8)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.7)]
    pub coverage: f64,
    #[arg(long, default_value_t = 2000)]
    pub train_sessions: usize,
    #[arg(long, default_value_t = 100)]
    pub dev_sessions: usize,
    #[arg(long, default_value_t = 700)]
    pub test_sessions: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Consumption {
    None,
    FeatureConcat,
    CrossAttention,
    Prompt,
}

impl From<Consumption> for ConsumptionMode {
    fn from(c: Consumption) -> Self {
        match c {
            Consumption::None => ConsumptionMode::None,
            Consumption::FeatureConcat => ConsumptionMode::FeatureConcat,
            Consumption::CrossAttention => ConsumptionMode::CrossAttention,
            Consumption::Prompt => ConsumptionMode::Prompt,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    FrozenSent,
    FrozenTok,
    SpmTok,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegimeArg {
    All,
    MhaAndProjections,
    ProjectionsOnly,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::All => Regime::All,
            RegimeArg::MhaAndProjections => Regime::MhaAndProjections,
            RegimeArg::ProjectionsOnly => Regime::ProjectionsOnly,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Phase {
    Seed,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ContextArg {
    AsLabeled,
    ForceEmpty,
}

impl From<ContextArg> for ContextMode {
    fn from(c: ContextArg) -> Self {
        match c {
            ContextArg::AsLabeled => ContextMode::AsLabeled,
            ContextArg::ForceEmpty => ContextMode::ForceEmpty,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Records,
}

/// One cell of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub consumption: Consumption,
    pub generator: Option<Generator>,
    pub cp: bool,
    pub regime: RegimeArg,
    pub seed: u64,
}

impl ExperimentSpec {
    /// Checks flag combinations before any work is done.
    pub fn validate(&self) -> CliResult<()> {
        match (self.consumption, self.generator) {
            (Consumption::None, Some(_)) => {
                return Err(CliError::Usage("--generator has no effect with --consumption none".into()))
            }
            (Consumption::None, None) => {}
            (_, None) => return Err(CliError::Usage("--generator is required with context consumption".into())),
            (Consumption::FeatureConcat, Some(g)) if g != Generator::FrozenSent => {
                return Err(CliError::Usage("feature-concat requires --generator frozen-sent".into()))
            }
            _ => {}
        }
        if self.cp && self.generator != Some(Generator::SpmTok) {
            return Err(CliError::Usage("--cp is only valid with --generator spm-tok".into()));
        }
        if self.consumption == Consumption::None && self.regime != RegimeArg::All {
            return Err(CliError::Usage("freeze regimes apply to context variants only".into()));
        }
        Ok(())
    }

    pub fn context_generator(&self) -> Option<ContextGenerator> {
        self.generator.map(|g| match (g, self.cp) {
            (Generator::FrozenSent, _) => ContextGenerator::FrozenSentence,
            (Generator::FrozenTok, _) => ContextGenerator::FrozenToken,
            (Generator::SpmTok, false) => ContextGenerator::LearnedRandom,
            (Generator::SpmTok, true) => ContextGenerator::LearnedCopied,
        })
    }

    /// Short row label such as `prompt/spm-tok+cp`.
    pub fn label(&self) -> String {
        let c = self.consumption.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default();
        let mut s = c;
        if let Some(g) = self.generator.and_then(|g| g.to_possible_value()) {
            s.push('/');
            s.push_str(g.get_name());
        }
        if self.cp {
            s.push_str("+cp");
        }
        if self.regime != RegimeArg::All {
            if let Some(r) = self.regime.to_possible_value() {
                s.push_str(" [");
                s.push_str(r.get_name());
                s.push(']');
            }
        }
        s
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub phase: Phase,
    /// Seed checkpoint to fine-tune from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Consumption::None)]
    pub consumption: Consumption,
    #[arg(long, value_enum)]
    pub generator: Option<Generator>,
    #[arg(long)]
    pub cp: bool,
    #[arg(long, value_enum, default_value_t = RegimeArg::All)]
    pub regime: RegimeArg,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub warmup: usize,
    #[arg(long, default_value_t = 100)]
    pub checkpoint_interval: usize,
    #[arg(long, default_value_t = 5)]
    pub n_average: usize,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_enum, default_value_t = ContextArg::AsLabeled)]
    pub context: ContextArg,
    /// Write hypotheses here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_enum, default_value_t = ContextArg::AsLabeled)]
    pub context: ContextArg,
    /// Evaluation record (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Evaluation record of the context-free baseline.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Evaluation records of the variants.
    #[arg(required = true)]
    pub candidates: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Decode(a) => commands::decode(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Report(a) => commands::report(&a),
    }
}
