//! `protonet` command-line tool.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error or missing
//! input file.

mod commands;
mod config;

use std::io;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Overrides;
use protonet::explain::ImageKind;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or values.
    Usage(String),
    /// An input file does not exist.
    Missing(PathBuf),
    Failed(String),
}

impl CliError {
    pub fn io(path: &Path, e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::NotFound {
            CliError::Missing(path.to_path_buf())
        } else {
            CliError::Failed(format!("{}: {e}", path.display()))
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Missing(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => f.write_str(m),
            CliError::Missing(p) => write!(f, "no such file: {}", p.display()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "protonet",
    version,
    about = "Train and inspect prototype-based interpretable image classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// key=value file; flags given on the command line take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

impl Common {
    fn overrides(&self) -> Result<Overrides, CliError> {
        let file = match &self.config {
            Some(path) => Overrides::from_file(path)?,
            None => Overrides::default(),
        };
        Ok(file.overlay(self.overrides.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes run.cfg, metrics, checkpoints and prototype snapshots
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print `test_acc=<accuracy>` of a checkpoint on one data split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[command(flatten)]
        common: Common,
    },
    /// Explain one prediction: distances, logits, probabilities, prototypes
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file to explain
        #[arg(long, conflicts_with = "index")]
        image: Option<PathBuf>,
        /// Row of the chosen split to explain
        #[arg(long)]
        index: Option<usize>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[command(flatten)]
        common: Common,
    },
    /// Decode every prototype and write it as an image
    ExportPrototypes {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "pgm")]
        format: ImageKind,
    },
    /// Print the transposed weight matrix with each prototype's most negative class
    ReportWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write weights.csv, weights.txt and prototype thumbnails here
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "pgm")]
        format: ImageKind,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, resume } => commands::train(common.overrides()?, resume.as_deref()),
        Command::Eval {
            checkpoint,
            split,
            common,
        } => commands::eval(&checkpoint, split, common.overrides()?),
        Command::Explain {
            checkpoint,
            image,
            index,
            split,
            common,
        } => {
            let target = match (image, index) {
                (Some(path), _) => commands::Target::File(path),
                (None, Some(i)) => commands::Target::Index(split, i),
                (None, None) => return Err(CliError::Usage("explain needs --image or --index".into())),
            };
            commands::explain(&checkpoint, target, common.overrides()?)
        }
        Command::ExportPrototypes {
            checkpoint,
            out,
            format,
        } => commands::export_prototypes(&checkpoint, &out, format),
        Command::ReportWeights {
            checkpoint,
            out,
            format,
        } => commands::report_weights(&checkpoint, out.as_deref(), format),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
