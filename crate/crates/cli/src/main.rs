mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "riskgame", version, about = "Risk-sensitive stochastic game solver")]
struct Cli {
    /// Worker threads for parallel sections (defaults to all cores).
    #[arg(long, global = true, env = "RISKGAME_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check ergodicity, recurrence and small-cost assumptions.
    Check(CheckArgs),
    /// Solve the discounted game by backward induction.
    SolveDiscounted(DiscountedArgs),
    /// Search for a stationary equilibrium of the ergodic game.
    SolveErgodic(ErgodicArgs),
    /// Monte Carlo estimates under a profile.
    Simulate(SimulateArgs),
    /// Re-verify the profile stored in a solution file.
    Verify(VerifyArgs),
}

#[derive(Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Exit with status 3 when any assumption fails.
    #[arg(long)]
    pub strict: bool,
    /// Largest number of pure profiles enumerated for irreducibility.
    #[arg(long, default_value_t = riskgame::markov::DEFAULT_ENUMERATION_CAP)]
    pub enumeration_cap: usize,
}

#[derive(Args)]
pub struct DiscountedArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Tail tolerance that fixes the horizon.
    #[arg(long, default_value_t = 1e-8)]
    pub eps: f64,
    /// Verification tolerance on the exponential scale.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ErgodicArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Largest accepted deviation gap.
    #[arg(long, default_value_t = 1e-8)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Solve even when an assumption fails.
    #[arg(long)]
    pub force: bool,
    /// Stop after iterated best response.
    #[arg(long)]
    pub no_fallback: bool,
    #[arg(long, default_value_t = 0.5)]
    pub damping: f64,
    #[arg(long, default_value_t = 100)]
    pub max_rounds: usize,
    #[arg(long, default_value_t = 10_000)]
    pub fallback_cap: usize,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Estimator {
    Discounted,
    Ergodic,
    ReturnTime,
}

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Solution file whose profile is simulated; uniform play without one.
    #[arg(long)]
    pub solution: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ergodic")]
    pub kind: Estimator,
    /// Paths for the discounted and return-time estimators.
    #[arg(long, default_value_t = 10_000)]
    pub paths: usize,
    /// Steps per path; discounted runs default to the profile horizon.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Batches for the ergodic estimator, CSV row groups otherwise.
    #[arg(long, default_value_t = 200)]
    pub batches: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Player whose cost is estimated (1 or 2).
    #[arg(long, default_value_t = 1)]
    pub player: u8,
    /// Initial state for discounted paths, target for return times.
    #[arg(long)]
    pub state: Option<usize>,
    /// Rate R in the moment E[R^sigma].
    #[arg(long, default_value_t = 1.1)]
    pub rate: f64,
    #[arg(long, default_value_t = riskgame::mc::RETURN_CAP)]
    pub cap: u64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub solution: PathBuf,
    /// Defaults to the tolerance recorded in the solution.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {}", e);
            return ExitCode::from(1);
        }
    }
    let result = match &cli.command {
        Command::Check(a) => commands::check(a),
        Command::SolveDiscounted(a) => commands::solve_discounted(a),
        Command::SolveErgodic(a) => commands::solve_ergodic(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure);
            ExitCode::from(failure.code())
        }
    }
}
