use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

mod artifacts;
mod commands;
mod config;
mod verify;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-convergence: {0}")]
    NonConvergence(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("verification failed: {0}")]
    Failed(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::NonConvergence(_) => 3,
            CliError::Infeasible(_) => 4,
            CliError::Failed(_) | CliError::Internal(_) => 1,
        }
    }
}

impl From<shotnoise::Error> for CliError {
    fn from(e: shotnoise::Error) -> Self {
        use shotnoise::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidArgument(_) | E::Unsupported(_) | E::Json(_) => CliError::Config(msg),
            E::NonConvergence { .. } => CliError::NonConvergence(msg),
            E::Infeasible(_) => CliError::Infeasible(msg),
            E::InvalidState(_) | E::DegenerateWeight { .. } | E::Io(_) => CliError::Internal(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "shotnoise",
    version,
    about = "Scaled shot-noise processes: simulation, fluid limits, rate functions and rare-event estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one scaled path and its events
    Simulate(RunArgs),
    /// Solve the controlled fluid equation
    Fluid(RunArgs),
    /// Minimize the rate cost under an endpoint or path constraint
    Rate(RunArgs),
    /// Estimate rare-event probabilities over a sequence of epsilons
    Mc(RunArgs),
    /// Run the self-verification suite
    Verify(RunArgs),
}

#[derive(Clone, Debug, clap::Args)]
pub struct RunArgs {
    /// JSON config file
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config
    #[arg(long)]
    pub seed: Option<u64>,
    /// Artifact directory
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker thread cap
    #[arg(long)]
    pub threads: Option<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let start = Instant::now();
    let (name, args) = match &cli.command {
        Command::Simulate(a) => ("simulate", a),
        Command::Fluid(a) => ("fluid", a),
        Command::Rate(a) => ("rate", a),
        Command::Mc(a) => ("mc", a),
        Command::Verify(a) => ("verify", a),
    };
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let run: fn(&RunArgs) -> Result<artifacts::Outcome, CliError> = match cli.command {
        Command::Simulate(_) => commands::simulate,
        Command::Fluid(_) => commands::fluid,
        Command::Rate(_) => commands::rate,
        Command::Mc(_) => commands::mc,
        Command::Verify(_) => verify::verify,
    };
    let out = run(args)?;
    out.finish(name, args, start.elapsed().as_secs_f64())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("shotnoise: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
