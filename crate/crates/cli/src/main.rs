//! `unisafe`: feasibility checks, single solves, datasets, training,
//! closed-loop simulation and controller benchmarks.

mod commands;
mod error;
mod input;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::{CliError, CliResult, EXIT_USAGE};

#[derive(Parser)]
#[command(name = "unisafe", version, about = "Smooth universal-formula controllers under affine input constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for a strictly feasible input.
    Check(ProblemArgs),
    /// Minimize J_p and print the result as JSON.
    Solve(SolveArgs),
    /// Sample a labelled dataset.
    Dataset(DatasetArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Validation MSE and hard-mode constraint satisfaction of a model.
    Eval(EvalArgs),
    /// Closed-loop simulation; writes a trajectory CSV and a metrics JSON.
    Simulate(SimulateArgs),
    /// Paired per-call timing of controllers.
    Bench(BenchArgs),
    /// Summarize a dataset, model or trajectory file.
    Inspect(InspectArgs),
}

/// Constraint tuple `A_i + B_i^T k < 0`.
#[derive(Args)]
pub struct ProblemArgs {
    /// Offsets, comma-separated, e.g. `--A=-1,2`.
    #[arg(long = "A", allow_hyphen_values = true)]
    pub a: Option<String>,
    /// Normals, rows separated by `;` and entries by `,`, e.g. `--B '1,0;0,1'`.
    #[arg(long = "B", allow_hyphen_values = true)]
    pub b: Option<String>,
    /// Inline JSON `{"A": [...], "B": [[...]]}` or a path to such a file.
    #[arg(long, conflicts_with_all = ["a", "b"])]
    pub problem: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Method {
    Newton,
    Flow,
    Sontag,
}

#[derive(Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[arg(long, value_enum, default_value = "newton")]
    pub method: Method,
    /// Gradient-norm tolerance of the flow.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Start Newton at this model's prediction.
    #[arg(long)]
    pub warmstart_model: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExampleArg {
    #[value(name = "1-2d")]
    OneTwoD,
    #[value(name = "1-10d")]
    OneTenD,
    #[value(name = "2")]
    Two,
}

#[derive(Args)]
pub struct DatasetArgs {
    #[arg(long = "N", default_value_t = 2)]
    pub n: usize,
    #[arg(long, default_value_t = 2)]
    pub m: usize,
    #[arg(long, default_value_t = 5000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub label_tol: f64,
    /// Sample states of this example instead of the training box.
    #[arg(long, value_enum)]
    pub example: Option<ExampleArg>,
    /// States are uniform in `[-half_width, half_width]^n` (with --example).
    #[arg(long, default_value_t = 3.0)]
    pub half_width: f64,
    /// Obstacle seed for example 1-10d.
    #[arg(long, default_value_t = unisafe::sim::DEFAULT_10D_SEED)]
    pub obstacle_seed: u64,
    /// Dataset CSV; the metadata goes to `<stem>.meta.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this model instead of a fresh one.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    /// Minibatch size; full batch if omitted.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Update only the last layer.
    #[arg(long)]
    pub freeze_last: bool,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Loss history CSV; defaults to `<stem>.history.csv` next to --out.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Also report the hard-mode constraint-satisfaction rate.
    #[arg(long)]
    pub hard: bool,
    /// Same split as `train`; 0 evaluates every row.
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ControllerArg {
    Ustar,
    Qp,
    Nn,
    NnHard,
    Warmstart,
    Interconnect,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Continuous,
    SampleAndHold,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum)]
    pub example: ExampleArg,
    #[arg(long, value_enum, default_value = "ustar")]
    pub controller: ControllerArg,
    /// Initial state, comma-separated. Defaults: 4,4 for 1-2d and
    /// 2,1,pi+0.1 for 2; required for 1-10d.
    #[arg(long, allow_hyphen_values = true)]
    pub x0: Option<String>,
    #[arg(long = "T", default_value_t = 30.0)]
    pub t_final: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub dt: f64,
    /// Gain of the dynamical controller.
    #[arg(long, default_value_t = 1e4)]
    pub tau: f64,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "continuous")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = unisafe::sim::DEFAULT_10D_SEED)]
    pub obstacle_seed: u64,
    /// Trajectory CSV; metrics go to `<stem>.metrics.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchControllerArg {
    /// Newton from a cold start.
    Ustar,
    /// Newton warmstarted at the previous call.
    UstarPrev,
    Qp,
    Nn,
    NnHard,
    /// Newton warmstarted at the network prediction.
    Warmstart,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "1-2d")]
    pub example: ExampleArg,
    /// Comma-separated; network rows need --model.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "ustar,ustar-prev,qp")]
    pub controllers: Vec<BenchControllerArg>,
    /// Number of initial states.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "T", default_value_t = 2.0)]
    pub t_final: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = unisafe::sim::DEFAULT_10D_SEED)]
    pub obstacle_seed: u64,
    /// Also write the report as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("UNISAFE_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::usage(format!("UNISAFE_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::internal(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Check(args) => commands::check(&args),
        Command::Solve(args) => commands::solve(&args),
        Command::Dataset(args) => commands::dataset(&args),
        Command::Train(args) => commands::train(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Simulate(args) => commands::simulate(&args),
        Command::Bench(args) => commands::bench(&args),
        Command::Inspect(args) => commands::inspect(&args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = err.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.code as u8)
        }
    }
}
