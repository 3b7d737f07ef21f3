//! Command-line front end for the cell-search engine.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or validation
//! failure (also used by the argument parser).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod runs;
pub mod speech;

use config::{Overrides, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
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

#[derive(Parser, Debug)]
#[command(
    name = "cellsearch",
    about = "Differentiable cell search for small-footprint keyword spotting",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML run configuration; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset root (fallback: the CELLSEARCH_DATA environment variable).
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Run/output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of stacked cells for the final network.
    #[arg(long)]
    depth: Option<usize>,
    /// Initial channel count for the final network.
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long, value_parser = ["nas1", "nas2"])]
    op_set: Option<String>,
    /// Use the built-in synthetic dataset (no audio needed).
    #[arg(long)]
    synthetic: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let overrides = Overrides {
            seed: self.seed,
            data_root: self.data_root.clone(),
            out_dir: self.out.clone(),
            depth: self.depth,
            channels: self.channels,
            op_set: self.op_set.clone(),
            synthetic: self.synthetic,
        };
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the bi-level architecture search and emit a genotype.
    Search {
        #[command(flatten)]
        common: Common,
    },
    /// Train a genotype from scratch on train+val and report test accuracy.
    Train {
        /// Genotype file produced by `search`.
        #[arg(long)]
        genotype: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a trained model checkpoint on the test split.
    Eval {
        /// Model checkpoint written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print the exact trainable-parameter accounting of a plan.
    Params {
        #[arg(long)]
        genotype: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Extract the MFCC feature matrix of one wav file as CSV.
    Features {
        #[arg(long)]
        wav: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Search { common } => commands::cmd_search(&common.resolve()?),
        Command::Train { genotype, common } => commands::cmd_train(&common.resolve()?, &genotype),
        Command::Eval { model, common } => commands::cmd_eval(&common.resolve()?, &model),
        Command::Params { genotype, common } => commands::cmd_params(&common.resolve()?, &genotype),
        Command::Features { wav, out } => commands::cmd_features(&wav, &out),
    }
}

/// Parse and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message; usage errors exit 2, --help 0
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    // a panic mid-run (e.g. unreadable audio during an epoch) is a runtime
    // failure, not a crash of the operator's shell
    match std::panic::catch_unwind(|| dispatch(cli)) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(_) => {
            eprintln!("error: aborted by runtime failure");
            1
        }
    }
}
