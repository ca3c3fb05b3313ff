//! `anc`: design and evaluate multi-loudspeaker feedback ANC controllers.
//!
//! Typical session:
//!
//! ```text
//! anc default-config > run.json
//! anc synth-plant --config run.json
//! anc design      --config run.json
//! anc verify      --config run.json
//! anc simulate    --config run.json
//! ```
//!
//! Exit codes: 0 success, 1 i/o error, 2 invalid configuration, 3 solver
//! failure, 4 instability detected.

mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Log;
use config::RunConfig;
use failure::Failure;

#[derive(Parser)]
#[command(name = "anc", version, about = "Feedback ANC controller design and closed-loop evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults apply to every omitted key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output.directory`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Progress messages on stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the plant and write its manifest and impulse responses.
    SynthPlant(Common),
    /// Design the multi-loudspeaker and single-loudspeaker controllers.
    Design(Common),
    /// Audit controllers: Nyquist winding, margins and dense constraint check.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Controller manifests; defaults to every design of the configuration.
        #[arg(long = "controller")]
        controllers: Vec<PathBuf>,
        /// Scale the controller taps before the audit.
        #[arg(long, default_value_t = 1.0)]
        gain: f64,
    },
    /// Simulate ANC off and each controller on identical noise.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Controller manifests; defaults to every design of the configuration.
        #[arg(long = "controller")]
        controllers: Vec<PathBuf>,
    },
    /// Synthesize, design, verify and simulate in one go.
    Run(Common),
    /// Print the JSON schema of the run configuration.
    Schema {
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default run configuration.
    DefaultConfig,
}

fn prepare(common: &Common) -> Result<(RunConfig, Log), Failure> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output.directory = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    cfg.validate()?;
    Ok((cfg, Log::new(common.verbose)))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::SynthPlant(common) => {
            let (cfg, log) = prepare(&common)?;
            commands::synth_plant_cmd(&cfg, &log).map(drop)
        }
        Command::Design(common) => {
            let (cfg, log) = prepare(&common)?;
            commands::design_cmd(&cfg, &log)
        }
        Command::Verify {
            common,
            controllers,
            gain,
        } => {
            let (cfg, log) = prepare(&common)?;
            commands::verify_cmd(&cfg, &controllers, gain, &log)
        }
        Command::Simulate { common, controllers } => {
            let (cfg, log) = prepare(&common)?;
            commands::simulate_cmd(&cfg, &controllers, &log)
        }
        Command::Run(common) => {
            let (cfg, log) = prepare(&common)?;
            commands::run_cmd(&cfg, &log)
        }
        Command::Schema { out } => {
            let schema = RunConfig::schema() + "\n";
            match out {
                Some(path) => std::fs::write(&path, schema)
                    .map_err(|e| Failure::Io(anyhow::anyhow!("cannot write {}: {e}", path.display()))),
                None => {
                    print!("{schema}");
                    Ok(())
                }
            }
        }
        Command::DefaultConfig => {
            println!("{}", RunConfig::default().to_json());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("anc: {}", f.message());
            f.exit_code()
        }
    }
}
