//! `sre`: generate data, train encoders, build indexes, query and evaluate.

mod commands;
mod config;

use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] sre_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use sre_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::Usage(_) | E::Parameter(_)) => 2,
            CliError::Core(E::Numeric { .. } | E::Aborted { .. }) => 4,
            CliError::Core(_) => 3,
        }
    }
}

/// Wraps a [`ValueEnum`] so config-file strings parse like flag values.
#[derive(Clone, Copy, Debug)]
pub struct Choice<T>(pub T);

impl<T: ValueEnum> FromStr for Choice<T> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        T::from_str(s, true).map(Choice)
    }
}

impl<T: ValueEnum> Display for Choice<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.0.to_possible_value().expect("no skipped variants");
        f.write_str(v.get_name())
    }
}

#[derive(Parser, Debug)]
#[command(name = "sre", version, about = "Cross-modal shape retrieval pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with train/test manifests.
    GenData(GenDataArgs),
    /// Train the encoders and write a checkpoint.
    Train(TrainArgs),
    /// Embed every cloud of a dataset and save a shape index.
    BuildIndex(BuildIndexArgs),
    /// Retrieve shapes for one view.
    Query(QueryArgs),
    /// Evaluate retrieval of held-out views.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    /// key=value file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Falls back to the SRE_SEED environment variable, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RecipeArg {
    /// sphere, box, cylinder, torus
    Default,
    /// Adds superellipsoids.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    ImageCentered,
    ShapeCentered,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ManifestArg {
    All,
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Infonce,
    Hcl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    PreAlign,
    FineTune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adamw,
    Sgd,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub recipe: Option<RecipeArg>,
    /// Comma-separated family list, overriding the recipe's.
    #[arg(long)]
    pub families: Option<String>,
    #[arg(long)]
    pub per_family: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    /// Share of views (image-centered) or shapes (shape-centered) for training.
    #[arg(long)]
    pub fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub manifest: Option<ManifestArg>,
    /// Output directory for checkpoint and logs.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub loss: Option<LossArg>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// `scratch` or a checkpoint path.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    /// First rung of the five-stage concentration ladder.
    #[arg(long)]
    pub beta0: Option<f64>,
    /// Joint epochs before the image branch freezes (pre-align mode).
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub embed: Option<usize>,
    /// Encode views on the fly instead of caching frozen embeddings.
    #[arg(long)]
    pub no_cache: bool,
    /// Evaluate on the test manifest every N epochs (0 = never).
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BuildIndexArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub manifest: Option<ManifestArg>,
    /// Index file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct QueryArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// A `.vfeat` view file.
    #[arg(long, conflicts_with_all = ["data", "shape", "view_index"])]
    pub view: Option<PathBuf>,
    /// Dataset directory, with --shape and --view-index.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub shape: Option<String>,
    #[arg(long)]
    pub view_index: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Refuse when the index was built from a different checkpoint.
    #[arg(long)]
    pub strict: bool,
    /// Optional directory for the ranked listing and echoed config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub manifest: Option<ManifestArg>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub strict: bool,
    /// Query with the indexed embeddings themselves.
    #[arg(long)]
    pub self_query: bool,
    /// Report directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::BuildIndex(a) => commands::build_index(a),
        Command::Query(a) => commands::query(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
