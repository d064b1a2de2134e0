//! Experiment runner CLI.
//!
//! `run` executes a configuration end to end and writes metrics.csv,
//! summary.json and (ledger runs) the chain export; `validate` only parses
//! and checks a configuration; `compare` renders a comparison table over
//! completed run directories. Exit codes: 1 for configuration errors, 2
//! for runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use splitsim::sim::{compare, execute_run, RunConfig, SimError};

#[derive(Parser)]
#[command(name = "splitsim", about = "Deterministic collaborative-learning protocol simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration end to end.
    Run {
        /// Path to a flat JSON configuration.
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the config's out_dir, or "run-out").
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parse and validate a configuration without running it.
    Validate {
        config: PathBuf,
    },
    /// Tabulate completed runs (one row per run directory).
    Compare {
        /// Run directories containing summary.json.
        run_dirs: Vec<PathBuf>,
    },
}

fn exit_code_for(err: &SimError) -> ExitCode {
    match err {
        SimError::Config(_) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<RunConfig, SimError> {
    let mut cfg = RunConfig::from_file(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, out } => {
            let cfg = match load_config(&config, seed) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("error: {}", e);
                    return exit_code_for(&e);
                }
            };
            match cfg.validate() {
                Ok(warnings) => {
                    for w in warnings {
                        eprintln!("warning: {}", w);
                    }
                }
                Err(e) => {
                    eprintln!("error: {}", e);
                    return exit_code_for(&e);
                }
            }
            let out_dir = out
                .or_else(|| cfg.out_dir.clone().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("run-out"));
            match execute_run(&cfg, &out_dir) {
                Ok(summary) => {
                    println!(
                        "{} seed {} ({}): final test loss {:.4}, total simulated time {:.3}s over {} rounds",
                        summary.topology,
                        summary.seed,
                        if summary.attacked { "attacked" } else { "normal" },
                        summary.final_test_loss,
                        summary.total_sim_time_s,
                        summary.rounds_total,
                    );
                    println!("outputs in {}", out_dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {}", e);
                    exit_code_for(&e)
                }
            }
        }
        Command::Validate { config } => match load_config(&config, None).and_then(|c| c.validate()) {
            Ok(warnings) => {
                for w in warnings {
                    eprintln!("warning: {}", w);
                }
                println!("ok");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {}", e);
                exit_code_for(&e)
            }
        },
        Command::Compare { run_dirs } => match compare(&run_dirs) {
            Ok(table) => {
                print!("{}", table);
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {}", e);
                exit_code_for(&e)
            }
        },
    }
}
