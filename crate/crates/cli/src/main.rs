//! `lqglm`: robust GLM fitting by maximum Lq-likelihood from the command line.
//!
//! Exit codes: 0 on success, 1 on input or usage errors, 2 when a fit did
//! not converge (the result is still written).

mod commands;
mod input;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Library(lqglm::Error),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => f.write_str(m),
            CliError::Library(e) => write!(f, "{e}"),
        }
    }
}

impl From<lqglm::Error> for CliError {
    fn from(e: lqglm::Error) -> Self {
        CliError::Library(e)
    }
}

/// Whether every fit behind a command converged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Converged,
    NotConverged,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QArg {
    Value(f64),
    Auto,
}

impl FromStr for QArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(QArg::Auto);
        }
        let q: f64 = s.parse().map_err(|_| format!("'{s}' is neither a number nor 'auto'"))?;
        if !(q > 0.0 && q <= 1.0) {
            return Err(format!("q = {q} must lie in (0, 1]"));
        }
        Ok(QArg::Value(q))
    }
}

/// `lo:step`, e.g. `0.70:0.01`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridArg {
    pub lo: f64,
    pub step: f64,
}

impl FromStr for GridArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (lo, step) = s.split_once(':').ok_or_else(|| format!("grid '{s}' is not lo:step"))?;
        let lo = lo.parse().map_err(|_| format!("bad grid lower end '{lo}'"))?;
        let step = step.parse().map_err(|_| format!("bad grid step '{step}'"))?;
        Ok(GridArg { lo, step })
    }
}

#[derive(Debug, Parser)]
#[command(name = "lqglm", version, about = "Robust GLM fitting by maximum Lq-likelihood")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a model and report coefficients, sandwich SEs and weights.
    Fit(FitCmd),
    /// Wald, score, bilinear-form or deviance test of H beta = h.
    Test(TestCmd),
    /// Per-observation residuals.
    Residuals(ResidualsCmd),
    /// Parametric-bootstrap envelope for a residual QQ plot.
    Envelope(EnvelopeCmd),
    /// Choose q over a grid.
    Selectq(SelectqCmd),
    /// Contamination Monte Carlo study with Poisson responses.
    Simulate(SimulateCmd),
    /// Print a bundled dataset as CSV.
    Dataset {
        #[arg(value_enum)]
        name: DatasetName,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DatasetName {
    Vaso,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Input CSV with a header row.
    #[arg(long, required_unless_present = "vaso")]
    pub data: Option<PathBuf>,
    /// Use the bundled vasoconstriction data (log volume and log rate).
    #[arg(long, conflicts_with_all = ["data", "log"])]
    pub vaso: bool,
    #[arg(long, default_value = "y")]
    pub response: String,
    /// bernoulli, poisson or gaussian.
    #[arg(long, default_value = "bernoulli")]
    pub family: String,
    /// canonical or probit.
    #[arg(long, default_value = "canonical")]
    pub link: String,
    /// Columns to replace by their natural log.
    #[arg(long, value_delimiter = ',')]
    pub log: Vec<String>,
    #[arg(long)]
    pub no_intercept: bool,
    /// Fixed dispersion; by default it is profiled when the family has one.
    #[arg(long)]
    pub phi: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Distortion parameter in (0, 1], or "auto" for the stability rule.
    #[arg(long, default_value = "1")]
    pub q: QArg,
    /// Grid for q = auto, as lo:step.
    #[arg(long, default_value = "0.70:0.01")]
    pub grid: GridArg,
    #[arg(long, default_value_t = 0.05)]
    pub rho: f64,
    #[arg(long, default_value_t = 100)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    /// Classical GLM routine: adjusted-response start, at most 25 steps.
    #[arg(long, conflicts_with_all = ["max_iter", "tol"])]
    pub glm_protocol: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, env = "LQGLM_SEED", default_value_t = 1)]
    pub seed: u64,
    /// Worker threads; 1 runs sequentially.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Write here instead of standard output.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct FitCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StatArg {
    Wald,
    Score,
    #[value(alias = "bf")]
    Bilinear,
    Deviance,
    All,
}

#[derive(Debug, Args)]
pub struct TestCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub out: OutputArgs,
    /// Hypothesis matrix H as a headerless CSV, one row per constraint.
    #[arg(long = "H", value_name = "FILE")]
    pub h_mat: PathBuf,
    /// Right-hand side h as a headerless CSV.
    #[arg(long = "h", value_name = "FILE")]
    pub h: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub stat: StatArg,
}

#[derive(Debug, Args)]
pub struct ResidualsCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub out: OutputArgs,
    /// standardized, deviance or quantile.
    #[arg(long = "type", default_value = "standardized")]
    pub kind: lqglm::diagnose::ResidualKind,
}

#[derive(Debug, Args)]
pub struct EnvelopeCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub out: OutputArgs,
    #[arg(long = "type", default_value = "deviance")]
    pub kind: lqglm::diagnose::ResidualKind,
    #[arg(long, default_value_t = 99)]
    pub reps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Stability,
    Efficiency,
}

#[derive(Debug, Args)]
pub struct SelectqCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub out: OutputArgs,
    #[arg(long, default_value = "0.70:0.01")]
    pub grid: GridArg,
    #[arg(long, default_value_t = 0.05)]
    pub rho: f64,
    #[arg(long, value_enum, default_value = "stability")]
    pub method: MethodArg,
}

#[derive(Debug, Args)]
pub struct SimulateCmd {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub eps: f64,
    #[arg(long)]
    pub nu: f64,
    #[arg(long, default_value_t = 1000)]
    pub reps: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    pub q_list: Vec<f64>,
    /// True coefficients; defaults to (1, 1, 1).
    #[arg(long, value_delimiter = ',')]
    pub beta: Vec<f64>,
    /// Prepend an intercept column (its coefficient is the first of --beta).
    #[arg(long)]
    pub intercept: bool,
    /// Draw covariates once and reuse them in every replicate.
    #[arg(long)]
    pub fixed_x: bool,
    /// Write here instead of standard output.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: Format,
}

fn main() -> ExitCode {
    // clap exits with 2 on bad usage; 2 is reserved for non-convergence here
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Fit(c) => commands::fit(&c),
        Command::Test(c) => commands::test(&c),
        Command::Residuals(c) => commands::residuals(&c),
        Command::Envelope(c) => commands::envelope(&c),
        Command::Selectq(c) => commands::selectq(&c),
        Command::Simulate(c) => commands::simulate(&c),
        Command::Dataset { name: DatasetName::Vaso } => {
            print!("{}", lqglm::datasets::VASO_CSV);
            Ok(Status::Converged)
        }
    };
    match result {
        Ok(Status::Converged) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => {
            eprintln!("warning: the fit did not converge; results were written anyway");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
