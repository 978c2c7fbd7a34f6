//! Command-line driver: `generate | split | train | eval | ablate`.

pub mod commands;
pub mod config;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use commands::{ablation_cells, run_ablation, AblationCell, CellResult};
pub use config::{RunConfig, RunFlags};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<amfir::Error> for CliError {
    fn from(e: amfir::Error) -> Self {
        use amfir::Error as E;
        match e {
            E::InvalidConfig(_) | E::InsufficientClasses { .. } | E::InsufficientRecords { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "amfir", version, about = "Active multimodal few-shot inference toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: RunFlags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Write the synthetic two-modality benchmark to --out.
    Generate,
    /// Split --data into class-disjoint --train-out / --test-out files.
    Split,
    /// Meta-train heads on --data; writes --model, --trace, --metrics.
    Train,
    /// Evaluate --model on --data; writes --metrics.
    Eval,
    /// Train and evaluate the ablation grid; writes the table to --out.
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Split => "split",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
        }
    }
}

/// Runs one parsed invocation and returns the text to print.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let cfg = RunConfig::resolve(&cli.flags)?;
    match cli.command {
        Command::Generate => commands::cmd_generate(&cfg),
        Command::Split => commands::cmd_split(&cfg),
        Command::Train => commands::cmd_train(&cfg),
        Command::Eval => commands::cmd_eval(&cfg),
        Command::Ablate => commands::cmd_ablate(&cfg),
    }
}
