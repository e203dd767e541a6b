//! `po2pls` command-line tool.
//!
//! Exit codes:
//!
//! | code | meaning                                             |
//! |------|-----------------------------------------------------|
//! | 0    | success                                             |
//! | 1    | other error                                         |
//! | 2    | invalid command-line usage                          |
//! | 3    | ragged CSV row                                      |
//! | 4    | non-numeric or missing CSV cell                     |
//! | 5    | CSV without data rows                               |
//! | 6    | dimension mismatch (rows of X and Y, model vs data) |
//! | 7    | ranks need more observations than available         |
//! | 8    | invalid ranks, parameters or configuration          |
//! | 9    | unreadable model file                               |
//! | 10   | file system error                                   |
//! | 11   | numerical failure during fitting or testing         |

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use po2pls::{Error, InitStrategy, TestMethod};

/// Environment variable overriding the worker thread count.
const THREADS_ENV: &str = "PO2PLS_NUM_THREADS";

#[derive(Parser)]
#[command(name = "po2pls", version, about = "Probabilistic two-way orthogonal PLS")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to two CSV data blocks.
    Fit(FitArgs),
    /// Test H0: B = 0 for a fitted model.
    Test(TestArgs),
    /// Predict Y (and optionally scores) from X.
    Predict(PredictArgs),
    /// Export scree eigenvalues for rank selection.
    Scree(ScreeArgs),
    /// Simulate data and run studies from a scenario JSON file.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// CSV file of X (header row, one observation per line).
    #[arg(long)]
    x: PathBuf,
    /// CSV file of Y with the same rows as X.
    #[arg(long)]
    y: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitKind {
    SvdPls,
    Random,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Number of joint components.
    #[arg(long)]
    r: usize,
    /// Number of X-specific components.
    #[arg(long)]
    rx: usize,
    /// Number of Y-specific components.
    #[arg(long)]
    ry: usize,
    /// Relative log-likelihood change at which iterations stop.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    #[arg(long, value_enum, default_value_t = InitKind::SvdPls)]
    init: InitKind,
    /// Seed for the random start.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale columns to unit variance after centering.
    #[arg(long)]
    scale: bool,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Log-likelihood trace CSV (default: the model path with `.trace.csv` appended).
    #[arg(long)]
    trace: Option<PathBuf>,
}

impl FitArgs {
    fn init_strategy(&self) -> InitStrategy {
        match self.init {
            InitKind::SvdPls => InitStrategy::SvdPls,
            InitKind::Random => InitStrategy::Random(self.seed),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Asymptotic,
    ParamBootstrap,
    NonparamBootstrap,
    Permutation,
}

impl From<MethodArg> for TestMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Asymptotic => TestMethod::Asymptotic,
            MethodArg::ParamBootstrap => TestMethod::ParamBootstrap,
            MethodArg::NonparamBootstrap => TestMethod::NonparamBootstrap,
            MethodArg::Permutation => TestMethod::Permutation,
        }
    }
}

#[derive(Args)]
struct TestArgs {
    /// Model file written by `fit`.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = MethodArg::Asymptotic)]
    method: MethodArg,
    /// Resample count (default 250 for bootstraps, 500 for permutations).
    #[arg(long)]
    n_resamples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    x: PathBuf,
    /// Optional Y for scores conditioned on both blocks.
    #[arg(long)]
    y: Option<PathBuf>,
    /// Output CSV of predicted Y in original units.
    #[arg(long)]
    out: PathBuf,
    /// Output CSV of latent scores.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct ScreeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    scale: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario configuration JSON.
    #[arg(long)]
    scenario_json: PathBuf,
    /// Prefix for all output files.
    #[arg(long)]
    out_prefix: String,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::RaggedRow { .. } => 3,
        Error::NonNumericCell { .. } => 4,
        Error::EmptyData { .. } => 5,
        Error::DimensionMismatch { .. } => 6,
        Error::RanksExceedSampleSize { .. } => 7,
        Error::InvalidRanks(_)
        | Error::InvalidConfig(_)
        | Error::InvalidParams(_)
        | Error::NonOrthogonalLoadings { .. }
        | Error::RankDeficientConcatenation { .. }
        | Error::NonPositiveVariance { .. }
        | Error::OrderingViolation { .. }
        | Error::Json(_) => 8,
        Error::ModelFormat(_) => 9,
        Error::Io(_) => 10,
        Error::RankDeficient { .. }
        | Error::SingularLatentCovariance
        | Error::SingularMomentMatrix { .. }
        | Error::DegenerateData(_)
        | Error::NonPositiveInformation { .. }
        | Error::ResamplingFailures { .. } => 11,
        Error::Csv(_) => 1,
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| format!("{THREADS_ENV} must be a positive integer, got {value:?}"))?;
    if n == 0 {
        return Err(format!("{THREADS_ENV} must be positive"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Fit(a) => commands::fit(&a),
        Command::Test(a) => commands::test(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Scree(a) => commands::scree(&a),
        Command::Simulate(a) => commands::simulate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
