//! `demsd` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use demsd::assignment::Method;

use crate::config::{Experiment, Overrides};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error(transparent)]
    Runtime(demsd::Error),
}

impl From<demsd::Error> for CliError {
    fn from(e: demsd::Error) -> Self {
        match e {
            demsd::Error::Config(m) => CliError::Config(m),
            demsd::Error::Dependency(m) => CliError::Dependency(m),
            other => CliError::Runtime(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Each,
    Rand,
    Fam,
    Emb,
    St,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Each => Method::Each,
            MethodArg::Rand => Method::Rand,
            MethodArg::Fam => Method::Fam,
            MethodArg::Emb => Method::Emb,
            MethodArg::St => Method::St,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "demsd", version, about = "Deep-encoder / multiple-shallow-decoder translation laboratory")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed and DEMSD_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory and DEMSD_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Language-to-decoder assignment method.
    #[arg(long, global = true, value_enum)]
    method: Option<MethodArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Train a model on the generated corpus.
    Train {
        /// Continue an interrupted run.
        #[arg(long)]
        resume: bool,
        /// Stop after this step, leaving resumable state.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Build and save a language-to-decoder assignment.
    Assign,
    /// Translate whitespace-tokenized lines.
    Translate {
        /// Target language code.
        #[arg(long)]
        lang: String,
        /// Input file; stdin when absent.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Test-set BLEU of the trained model.
    Evaluate,
    /// Decoding speed of the trained model.
    Bench,
    /// Train, score and time every `[[sweep]]` entry.
    Sweep,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        method: cli.method.map(Method::from),
    };
    let exp = Experiment::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenData => commands::gen_data(&exp),
        Command::Train { resume, stop_after } => commands::train(&exp, resume, stop_after),
        Command::Assign => commands::assign(&exp),
        Command::Translate { lang, input } => commands::translate(&exp, &lang, input.as_deref()),
        Command::Evaluate => commands::evaluate(&exp),
        Command::Bench => commands::bench(&exp),
        Command::Sweep => commands::sweep(&exp),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("demsd: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
