//! The `neurodx` command-line workflow: train, evaluate, predict, inspect, plot.
//!
//! Exit codes: 0 on success, 2 for usage or input errors, 3 when training
//! hits a non-finite loss.

pub mod commands;
pub mod config;
pub mod plot;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

pub use config::{Overrides, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(neurodx::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Run(neurodx::Error::NonFinite { .. }) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<neurodx::Error> for CliError {
    fn from(e: neurodx::Error) -> Self {
        CliError::Run(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "neurodx", version, about = "Train and evaluate a hybrid CNN-LSTM image classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a directory-per-class dataset.
    Train(CommonArgs),
    /// Score a checkpoint and write confusion, metrics and ROC tables.
    Evaluate(EvaluateArgs),
    /// Print class probabilities for individual images.
    Predict(PredictArgs),
    /// Print the layer table of a preset or checkpoint.
    Inspect(CommonArgs),
    /// Render SVG charts from history and ROC tables.
    Plot(PlotArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Predict(_) => "predict",
            Command::Inspect(_) => "inspect",
            Command::Plot(_) => "plot",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// `key = value` configuration file; flags override its entries.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dataset root with one subdirectory per class.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Directory for every artifact written by the command.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = ["paper", "toy"])]
    pub preset: Option<String>,
    /// `spatial49` or `single_step`.
    #[arg(long)]
    pub sequence_mode: Option<String>,
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "F")]
    pub lr: Option<f64>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Largest training rotation in degrees; 0 disables augmentation.
    #[arg(long, value_name = "DEG")]
    pub max_rotation_deg: Option<f64>,
}

impl CommonArgs {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            data: self.data.clone(),
            out: self.out.clone(),
            checkpoint: self.checkpoint.clone(),
            preset: self.preset.clone(),
            sequence_mode: self.sequence_mode.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            seed: self.seed,
            max_rotation_deg: self.max_rotation_deg,
        }
    }

    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum SubsetArg {
    /// Every image in the dataset.
    #[default]
    All,
    /// Training side of the seeded split recorded in the checkpoint.
    Train,
    /// Held-out side of the same split.
    Test,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_enum, default_value_t = SubsetArg::All)]
    pub subset: SubsetArg,
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(required = true, value_name = "IMAGE")]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PlotArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Per-epoch history written by `train`.
    #[arg(long, value_name = "FILE")]
    pub history: Option<PathBuf>,
    /// ROC table written by `evaluate`; repeat for several classes.
    #[arg(long, value_name = "FILE")]
    pub roc: Vec<PathBuf>,
}

pub fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Train(a) => commands::train(&a.resolve()?).map(|_| ()),
        Command::Evaluate(a) => commands::evaluate(&a.common.resolve()?, a.subset).map(|_| ()),
        Command::Predict(a) => commands::predict(&a.common.resolve()?, &a.images, a.common.out.is_some()),
        Command::Inspect(a) => commands::inspect(&a.resolve()?, a.out.is_some()),
        Command::Plot(a) => commands::plot(&a.common.resolve()?, a.history.as_deref(), &a.roc).map(|_| ()),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                let mut cmd = Cli::command();
                cmd.build();
                if let Some(sub) = cmd.find_subcommand_mut(cli.command.name()) {
                    eprintln!("\n{}", sub.render_usage());
                }
            }
            e.exit_code()
        }
    }
}
