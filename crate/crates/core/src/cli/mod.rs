//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod output;
mod settings;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use settings::{DatasetKind, Settings};

pub const METRICS_SCHEMA: &str = "smoothloss.metrics/1";
pub const SWEEP_SCHEMA: &str = "smoothloss.sweep/1";

/// Caps the number of sweep points trained at once.
pub const THREADS_ENV: &str = "SMOOTHLOSS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "smoothloss", version, about = "Metric learning with a graph smoothness loss")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its checkpoint, run log and final metrics
    Train(TrainArgs),
    /// Report clean test accuracies of a checkpoint
    Eval(EvalArgs),
    /// Train once per value of one hyperparameter
    Sweep(SweepArgs),
    /// Compare a model with a baseline under input corruptions
    CorruptEval(CorruptEvalArgs),
    /// Write the embeddings of a dataset split as CSV
    Embed(EmbedArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat TOML file with default values for any flag
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    K,
    D,
    Alpha,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::K => "k",
            Axis::D => "d",
            Axis::Alpha => "alpha",
        }
    }
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Hyperparameter to vary; the other two stay at k = max, d = C, alpha = 2
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values of the axis
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Also write the record to DIR/eval.ndjson
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorruptEvalArgs {
    /// Model under test
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Reference model, trained on the same data
    #[arg(long)]
    pub baseline: PathBuf,
    /// Corruption seed (defaults to the checkpoint's seed)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the report to DIR/robustness.ndjson
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    /// Directory receiving embeddings.csv
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn usage(error: impl Into<anyhow::Error>) -> CliError {
        CliError { code: 2, error: error.into() }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> CliError {
        CliError { code: 1, error: error.into() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (including the program name), runs the command and maps
/// the outcome to an exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Sweep(args) => commands::sweep(args),
        Command::CorruptEval(args) => commands::corrupt_eval(args),
        Command::Embed(args) => commands::embed(args),
    }
}
