mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{ExperimentConfig, ModeSelection};

#[derive(Parser)]
#[command(name = "trackmpc", version, about = "Tracking MPC experiments on the two-link robot bench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the long-horizon problem and write the feasible reference with its multipliers.
    SolveOcp(CommonArgs),
    /// Closed-loop simulation with decrease and ISS certificates.
    Run(CommonArgs),
    /// Rotation, terminal-condition and controller-equivalence checks.
    Verify(CommonArgs),
    /// LQR terminal ingredients and the largest validated terminal level.
    SynthesizeTerminal(CommonArgs),
    /// Sample the tracked reference with its infeasibility profile.
    ExportReference(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Bench name; overrides the config file.
    bench: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeSelection>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<ExperimentConfig, commands::CliError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).map_err(|e| commands::CliError::Usage(e.0))?,
            None => ExperimentConfig::default(),
        };
        if let Some(b) = &self.bench {
            cfg.bench = b.clone();
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.steps = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (args, run): (&CommonArgs, fn(&ExperimentConfig) -> Result<(), commands::CliError>) = match &cli.command {
        Command::SolveOcp(a) => (a, commands::solve_ocp),
        Command::Run(a) => (a, commands::run),
        Command::Verify(a) => (a, commands::verify),
        Command::SynthesizeTerminal(a) => (a, commands::synthesize_terminal),
        Command::ExportReference(a) => (a, commands::export_reference),
    };
    match args.resolve().and_then(|cfg| run(&cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
