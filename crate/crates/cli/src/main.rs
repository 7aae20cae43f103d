//! `m2po`: generate, score, train on, evaluate and analyze synthetic
//! translation preference corpora.
//!
//! Exit codes: 0 on success, 1 when the configuration or an input file fails
//! validation, 2 when a command fails while running.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use m2po_core::trainer::TrainMode;

use crate::config::{PipelineConfig, SEED_ENV};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<m2po_core::Error> for CliError {
    fn from(e: m2po_core::Error) -> Self {
        use m2po_core::Error as E;
        match e {
            E::Contract(_) | E::Parse { .. } | E::Invariant { .. } => CliError::Validation(e.to_string()),
            E::Io { .. } | E::Scorer { .. } | E::NonFinite { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "m2po", version, about = "Multi-pair preference optimization on a synthetic translation task")]
struct Cli {
    /// Pipeline configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed and the M2PO_SEED environment variable.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a corpus of candidate pools.
    Gen(GenArgs),
    /// Fill QE, alignment and static scores.
    Score(ScoreArgs),
    /// Train a policy and write checkpoint, metrics and pairs.
    Train(TrainArgs),
    /// Greedy-decode a corpus with a checkpoint and report metrics.
    Eval(EvalArgs),
    /// Emit the severity/correlation report and the coverage-vs-QE scatter.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_sources: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub id_prefix: Option<String>,
    /// Corpus whose sources must not be drawn again (for held-out sets).
    #[arg(long)]
    pub exclude: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lambda_f: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Statically scored training corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Held-out corpus evaluated before training and after every epoch.
    #[arg(long)]
    pub held_out: Option<PathBuf>,
    /// Start from this checkpoint instead of the uniform policy.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub lambda_pref: Option<f64>,
    #[arg(long)]
    pub lambda_rank: Option<f64>,
    #[arg(long)]
    pub lambda_bc: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Write the metrics JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Statically scored corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown mode {s:?}; expected m2po, single_pair_dpo or bc_only"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    let env_seed = std::env::var(SEED_ENV).ok();
    cfg.resolve_seed(cli.seed, env_seed.as_deref())?;
    match cli.command {
        Command::Gen(a) => commands::gen(cfg, &a),
        Command::Score(a) => commands::score(cfg, &a),
        Command::Train(a) => commands::train(cfg, &a),
        Command::Eval(a) => commands::eval(cfg, &a),
        Command::Analyze(a) => commands::analyze(cfg, &a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("m2po: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
