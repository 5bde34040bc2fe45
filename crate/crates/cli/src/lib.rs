//! `mcat`: synth → train → efa → calibrate → simulate / serve, plus an
//! offline terminal session. Exit codes: 0 success, 1 usage or validation
//! error, 2 runtime error.

mod commands;
pub mod files;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "mcat", version, about = "Adaptive multidimensional assessment pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic embedding corpus with condition-score targets.
    Synth(SynthArgs),
    /// Fit the embedding-to-score regression and write per-respondent and
    /// per-question predictions next to the model.
    Train(TrainArgs),
    /// Parallel analysis, extraction and rotation over condition scores.
    Efa(EfaArgs),
    /// Fit the graded-response item bank by quadrature EM.
    Calibrate(CalibrateArgs),
    /// Compare adaptive and random administration on a simulated population.
    Simulate(SimulateArgs),
    /// Run the HTTP session service.
    Serve(ServeArgs),
    /// Interactive terminal session with category answers.
    Session(SessionArgs),
    /// Write the built-in 48-item demo bank and its factor structure.
    Fixture(FixtureArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 300)]
    pub respondents: usize,
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Writes embeddings.jsonl and targets.jsonl here.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Single,
    Multi,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AggArg {
    Input,
    Output,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum QmodeArg {
    /// Mean of question-text and answer embeddings.
    Lang,
    /// One-hot question id appended to the answer embedding.
    Id,
    /// Answer embedding only.
    None,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CombineArg {
    Mean,
    Concat,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub targets: PathBuf,
    #[arg(long, value_enum, default_value_t = TaskArg::Multi)]
    pub task: TaskArg,
    #[arg(long, value_enum, default_value_t = AggArg::Input)]
    pub agg: AggArg,
    #[arg(long, value_enum, default_value_t = QmodeArg::None)]
    pub qmode: QmodeArg,
    #[arg(long, value_enum, default_value_t = CombineArg::Mean)]
    pub qa_combine: CombineArg,
    #[arg(long, default_value_t = 16)]
    pub truncate_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub categories: usize,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// model.json; scores.jsonl, question_scores.json, responses.jsonl and
    /// train_report.json are written to the same directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EfaArgs {
    /// Respondent condition scores (JSONL `{respondent, scores}`).
    #[arg(long)]
    pub scores: PathBuf,
    /// Per-question predictions from `train`; without it the structure has
    /// no question level.
    #[arg(long)]
    pub question_scores: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub n_sims: usize,
    #[arg(long, default_value_t = 0.95)]
    pub quantile: f64,
    /// `absolute[:t]` or `relative[:r]`.
    #[arg(long, default_value = "absolute:0.4")]
    pub rule: String,
    /// Skip parallel analysis and retain this many factors.
    #[arg(long)]
    pub factors: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// JSONL `{respondent, item, category}`.
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub structure: PathBuf,
    /// Calibration settings (JSON or TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Per-question category counts are taken from this model when given.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub categories: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to fit_report.json beside the bank.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Adaptive,
    Random,
    Both,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub structure: PathBuf,
    #[arg(long, value_enum, default_value_t = PolicyArg::Both)]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = 20)]
    pub runs: usize,
    #[arg(long, default_value_t = 300)]
    pub population: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.3)]
    pub truth_noise: f64,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[arg(long, default_value_t = 0.01)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Writes PREFIX.csv, and PREFIX.svg when both policies run.
    #[arg(long, value_name = "PREFIX")]
    pub plot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML service config; MCAT_* variables and these flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub bind: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub structure: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub embedding_url: Option<String>,
}

#[derive(Debug, Args)]
pub struct SessionArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub structure: PathBuf,
    #[arg(long)]
    pub max_items: Option<usize>,
    #[arg(long)]
    pub min_items: Option<usize>,
    /// Write the final session state here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    /// Writes bank.json and structure.json here.
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<mcat_core::Error> for CliError {
    fn from(e: mcat_core::Error) -> Self {
        use mcat_core::Error as E;
        match e {
            E::Io(_) | E::Numerical(_) | E::Embedding(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<mcat_service::ServiceError> for CliError {
    fn from(e: mcat_service::ServiceError) -> Self {
        if e.status >= 500 {
            CliError::Runtime(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
