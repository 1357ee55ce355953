//! Experiment driver: dataset generation, training, evaluation, few-shot and
//! noise sweeps, and downstream ToA positioning, all from TOML configs.

mod commands;
mod config;
mod report;

use clap::{Args, Parser, Subcommand};
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "skylos", version, about = "Synthetic LoS/NLoS identification and UAV positioning testbed")]
struct Cli {
    /// Cap the rayon worker count; 1 guarantees bit-reproducible output.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Escalate non-convergence warnings to exit code 4.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's primary output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset and save it in the SNLD format.
    Gen(CommonArgs),
    /// Train a model on a route-held-out split; writes an SNLM checkpoint.
    Train(CommonArgs),
    /// Evaluate a checkpoint: accuracy, confusion matrix, per-snapshot CSV.
    Eval(CommonArgs),
    /// Cross-scenario few-shot sweep: fine-tune on k target samples.
    Fewshot(CommonArgs),
    /// Accuracy under Gaussian image noise over a variance grid.
    Noise(CommonArgs),
    /// ToA positioning with random / predicted-LoS / true-LoS selection.
    Position(CommonArgs),
}

/// Errors mapped onto process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Exit code 2: bad configuration.
    Config(String),
    /// Exit code 3: data or model errors.
    Data(String),
    /// Exit code 4: non-convergence escalated by --strict.
    NonConvergence(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Data(msg) => write!(f, "data error: {msg}"),
            CliError::NonConvergence(msg) => write!(f, "non-convergence: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::NonConvergence(_) => 4,
        }
    }
}

impl From<skylos::dataset::DataError> for CliError {
    fn from(e: skylos::dataset::DataError) -> Self {
        use skylos::dataset::DataError;
        match e {
            DataError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<skylos::model::ModelError> for CliError {
    fn from(e: skylos::model::ModelError) -> Self {
        use skylos::model::ModelError;
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<skylos::scene::SceneError> for CliError {
    fn from(e: skylos::scene::SceneError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("config error: could not set thread count: {e}");
            return ExitCode::from(2);
        }
    }
    let strict = cli.strict;
    let result = match &cli.command {
        Command::Gen(args) => commands::gen(args),
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::Fewshot(args) => commands::fewshot(args),
        Command::Noise(args) => commands::noise(args),
        Command::Position(args) => commands::position(args, strict),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
