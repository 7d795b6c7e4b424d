use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use icpwave::harness::{execute, HarnessError, RunConfig, Scenario};
use icpwave::mpc::ControllerKind;

/// Simulated ICP waveform experiments: controller tracking comparison and
/// BO-driven waveform modulation.
#[derive(Debug, Parser)]
#[command(name = "icpwave", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare PID, MPC and offset-free MPC on pulse tracking.
    Tracking(Flags),
    /// Learn the reference with BO and report the pressure modulation.
    Modulation(Flags),
}

#[derive(Debug, clap::Args)]
struct Flags {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Heart rate [beats/min].
    #[arg(long)]
    bpm: Option<f64>,
    /// pid, mpc or mpc_offset_free. Tracking runs only this controller.
    #[arg(long)]
    controller: Option<ControllerKind>,
    /// Output root; results go to <out>/<scenario>/<timestamp>/.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn build_config(scenario: Scenario, flags: Flags) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.scenario = scenario;
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(bpm) = flags.bpm {
        cfg.bpm = bpm;
    }
    if let Some(kind) = flags.controller {
        match scenario {
            Scenario::Tracking => cfg.tracking.controllers = vec![kind],
            Scenario::Modulation => cfg.controller = kind,
        }
    }
    if let Some(out) = flags.out {
        cfg.out_dir = out;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (scenario, flags) = match cli.command {
        Command::Tracking(f) => (Scenario::Tracking, f),
        Command::Modulation(f) => (Scenario::Modulation, f),
    };
    match build_config(scenario, flags).and_then(|cfg| execute(&cfg)) {
        Ok(dir) => {
            println!("output: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
