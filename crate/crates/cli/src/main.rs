//! `ctnmt`: train, translate, score, and benchmark character-level
//! translation models from one binary.
//!
//! Exit codes are stable per error class: 0 success, 1 usage or
//! configuration, 2 IO, 3 data validation, 4 numeric failure.

mod bench_cmd;
mod score_cmd;
mod simple_cmds;
mod train_cmd;
mod translate_cmd;
mod util;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use ctnmt_core::decode::DecodeError;
use ctnmt_core::metrics::MetricsError;
use ctnmt_core::model::ModelError;
use ctnmt_core::tokenize::TokenizeError;
use ctnmt_core::train::TrainError;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Io(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Io(e.to_string())
    }
}

impl From<TokenizeError> for CliError {
    fn from(e: TokenizeError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> CliError {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            ModelError::Tensor(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> CliError {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Io(io) => CliError::Io(io.to_string()),
            TrainError::Corrupt(_) => CliError::Data(e.to_string()),
            TrainError::MissingGrad(_) => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Tensor(_) => CliError::Numeric(e.to_string()),
            TrainError::Tokenize(t) => t.into(),
        }
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> CliError {
        match e {
            DecodeError::Config(_) => CliError::Usage(e.to_string()),
            DecodeError::Model(m) => m.into(),
            DecodeError::Tensor(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> CliError {
        match e {
            MetricsError::Io(io) => CliError::Io(io.to_string()),
            MetricsError::Usage(_) => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ctnmt",
    version,
    about = "Character-level neural machine translation toolkit"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct GlobalArgs {
    /// key=value configuration file, consulted before command-line flags
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Root random seed (default 13)
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Suppress progress logging; primary results still print
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Learn BPE merge rules from a corpus
    BpeLearn(simple_cmds::BpeLearnArgs),
    /// Train a translation model
    Train(train_cmd::TrainArgs),
    /// Translate a file line by line with a trained checkpoint
    Translate(translate_cmd::TranslateArgs),
    /// Score hypothesis lines against line-aligned references
    Score(score_cmd::ScoreArgs),
    /// Compare update speed of the two character-level models
    Benchmark(bench_cmd::BenchmarkArgs),
    /// Build a vocabulary from a corpus and report its size
    Vocab(simple_cmds::VocabArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::BpeLearn(args) => simple_cmds::bpe_learn(&cli.global, &args),
        Command::Train(args) => train_cmd::train(&cli.global, &args),
        Command::Translate(args) => translate_cmd::translate(&cli.global, &args),
        Command::Score(args) => score_cmd::score(&cli.global, &args),
        Command::Benchmark(args) => bench_cmd::benchmark(&cli.global, &args),
        Command::Vocab(args) => simple_cmds::vocab(&cli.global, &args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
