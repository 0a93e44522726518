//! `mvsteady`: steady states, free evolution and feedback stabilisation of
//! McKean-Vlasov equations on the torus, driven by TOML configs.

mod commands;
mod config;
mod output;
mod problem;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{RunConfig, PRESETS};
use crate::problem::CliError;

#[derive(Parser)]
#[command(name = "mvsteady", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate steady states by deflation and classify them.
    SteadyStates(Common),
    /// Re-check the roots of a steady-states run on a finer quadrature.
    Verify {
        #[command(flatten)]
        common: Common,
        /// steadystates.json to check (default: in the output directory).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Integrate the uncontrolled dynamics.
    Evolve(Common),
    /// Steer the state to a target steady state by model predictive control.
    Stabilize(Common),
    /// List the built-in presets, or print one.
    Presets { name: Option<String> },
}

#[derive(Args)]
struct Common {
    /// TOML config; overrides the preset key by key.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for random initial guesses and perturbations.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = config::load(self.config.as_deref(), self.preset.as_deref())
            .map_err(|e| CliError::Input(e.to_string()))?;
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.deflation.seed = seed;
            cfg.stability.seed = seed;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SteadyStates(c) => commands::steady_states(&c.load()?),
        Command::Verify { common, input } => {
            let mut cfg = common.load()?;
            if input.is_some() {
                cfg.verify.input = input;
            }
            commands::verify(&cfg)
        }
        Command::Evolve(c) => commands::evolve(&c.load()?),
        Command::Stabilize(c) => commands::stabilize(&c.load()?),
        Command::Presets { name: None } => {
            for (name, text) in PRESETS {
                let summary = text.lines().next().unwrap_or("").trim_start_matches("# ");
                println!("{name:<12} {summary}");
            }
            Ok(())
        }
        Command::Presets { name: Some(name) } => match config::preset(&name) {
            Some(text) => {
                print!("{text}");
                Ok(())
            }
            None => Err(CliError::Input(format!("unknown preset `{name}`"))),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
