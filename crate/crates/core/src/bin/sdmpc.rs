use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sdmpc_core::error::{Error, ErrorCategory};
use sdmpc_core::scenario::{emit_report, run_scenario, Mode, ScenarioConfig};
use sdmpc_core::verify;

#[derive(Parser)]
#[command(
    name = "sdmpc",
    version,
    about = "Secure distributed MPC benchmark runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write trace.csv, objectives.json and summary.txt.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "nominal")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        /// Override the seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Skip detection entirely.
        #[arg(long)]
        no_defense: bool,
    },
    /// Check model, solver, projection and detection invariants on a short run.
    Verify {
        #[arg(long)]
        config: PathBuf,
        /// Closed-loop steps to simulate.
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Run {
            config,
            mode,
            out,
            seed,
            no_defense,
        } => {
            let mut cfg = ScenarioConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if no_defense {
                cfg.defense_enabled = false;
            }
            let result = run_scenario(&cfg, mode)?;
            let files = emit_report(&result.trace, &result.report, &mode.to_string(), &out)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(true)
        }
        Command::Verify { config, steps } => {
            let cfg = ScenarioConfig::load(&config)?;
            let checks = verify::run_suite(&cfg, steps)?;
            for c in &checks {
                let status = if c.passed { "PASS" } else { "FAIL" };
                println!("{status}  {:<42} {}", c.name, c.detail);
            }
            Ok(checks.iter().all(|c| c.passed))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Validation => 2,
                ErrorCategory::Solver => 3,
                ErrorCategory::Io => 4,
            })
        }
    }
}
