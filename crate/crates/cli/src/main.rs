//! `memctrl`: solve, optimize and check memory-controlled systems from the
//! command line. Every invocation writes a self-describing run directory.

/// `println!` that tolerates a closed stdout, e.g. when piped into `head`.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

mod commands;
mod inputs;
mod run;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "memctrl", version, about = "Optimal control with measure-valued memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate the state equation for a given plan.
    Forward(ForwardArgs),
    /// Minimize the cost over plans with Frank–Wolfe.
    Optimize(OptimizeArgs),
    /// Maximum-principle residuals of a plan; fails above `--tol`.
    Verify(VerifyArgs),
    /// Delay-function realizations of a plan and their costs.
    Relax(RelaxArgs),
    /// Closed-form switching time, costate and reference costs of the scalar
    /// example.
    Analytic(AnalyticArgs),
    /// Run a Cartesian parameter grid, one run directory per point.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ProblemArgs {
    /// Problem description (JSON).
    #[arg(long)]
    pub problem: PathBuf,
    /// Override the number of grid steps.
    #[arg(long)]
    pub n: Option<usize>,
    /// Write into this directory instead of a hashed one under the run root.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ForwardArgs {
    #[command(flatten)]
    pub common: ProblemArgs,
    /// Plan file (`.csv` dense rows, otherwise `i j w` triplets) or one of
    /// `zero`, `recent`, `half`, `uniform`.
    #[arg(long, default_value = "recent")]
    pub plan: String,
    /// Also run the Picard fixed-point solver and report its residuals.
    #[arg(long)]
    pub picard: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepArg {
    /// Diminishing steps `2 / (k + 2)`.
    Dim,
    /// Backtracking line search.
    Ls,
}

#[derive(Args, Debug, Clone)]
pub struct FwArgs {
    #[arg(long, default_value_t = 1e-8)]
    pub gap_tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    /// Random Dirichlet starts on top of the fixed ones.
    #[arg(long, default_value_t = 4)]
    pub starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = StepArg::Ls)]
    pub step: StepArg,
}

#[derive(Args, Debug, Clone)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub common: ProblemArgs,
    #[command(flatten)]
    pub fw: FwArgs,
    /// Extra starting plan, tried first.
    #[arg(long)]
    pub warm: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: ProblemArgs,
    #[arg(long, default_value = "recent")]
    pub plan: String,
    /// Largest acceptable row residual.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// Also write the full Hamiltonian table.
    #[arg(long)]
    pub table: bool,
}

#[derive(Args, Debug, Clone)]
pub struct RelaxArgs {
    #[command(flatten)]
    pub common: ProblemArgs,
    #[arg(long, default_value = "half")]
    pub plan: String,
    /// Realization levels.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    pub levels: Vec<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instance {
    Scalar,
    Nonexistence,
    TwoDim,
}

#[derive(Args, Debug, Clone)]
pub struct AnalyticArgs {
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub a: f64,
    #[arg(long, default_value_t = 0.5)]
    pub b: f64,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Write the chosen instance as a problem file and exit.
    #[arg(long)]
    pub emit_problem: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Instance::Scalar)]
    pub instance: Instance,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[arg(long)]
    pub problem: PathBuf,
    /// `name=start:end:count` or `name=v1,v2,...`; repeat for a grid.
    /// Names: n, alpha, beta, a, b, lambda, p, or a dotted JSON path.
    #[arg(long = "param", required = true)]
    pub params: Vec<String>,
    /// Optimize at every point instead of evaluating `--plan`.
    #[arg(long)]
    pub optimize: bool,
    #[arg(long, default_value = "recent")]
    pub plan: String,
    #[command(flatten)]
    pub fw: FwArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let outcome = match cli.command {
        Command::Forward(a) => commands::forward(&a, &argv),
        Command::Optimize(a) => commands::optimize(&a, &argv),
        Command::Verify(a) => commands::verify(&a, &argv),
        Command::Relax(a) => commands::relax(&a, &argv),
        Command::Analytic(a) => commands::analytic(&a, &argv),
        Command::Sweep(a) => sweep::run(&a, &argv),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for solver blow-up, 1 for everything else. Usage errors never get here:
/// clap exits with 2 on its own.
fn exit_code(e: &anyhow::Error) -> u8 {
    let blow_up = e
        .chain()
        .filter_map(|c| c.downcast_ref::<memctrl_core::Error>())
        .any(|c| c.is_blow_up());
    if blow_up {
        3
    } else {
        1
    }
}
