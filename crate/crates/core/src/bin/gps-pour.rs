use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gps_core::cli::checkpoint::load_policy;
use gps_core::cli::config::ExperimentConfig;
use gps_core::cli::oracle::run_oracles;
use gps_core::cli::{resume_experiment, run_experiment, RunOutcome};
use gps_core::gps::{mean_std, policy_rollout};

/// Guided policy search on a simulated pouring task with delayed scale
/// readings.
#[derive(Parser)]
#[command(name = "gps-pour", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML configuration file.
    Run {
        config: PathBuf,
        /// Overrides `gps.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output_dir`.
        #[arg(long, env = "GPS_POUR_OUT")]
        out: Option<PathBuf>,
        /// Validate and print the resolved configuration without running.
        #[arg(long)]
        dry_run: bool,
    },
    /// Continue a run from its `state.bin` checkpoint.
    Resume {
        checkpoint: PathBuf,
        #[arg(long, env = "GPS_POUR_OUT")]
        out: Option<PathBuf>,
    },
    /// Roll a saved policy out from every starting fill and print the errors.
    Eval {
        policy: PathBuf,
        /// Configuration for the simulator and fills (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the analytic self-checks.
    Oracle,
}

fn outcome_code(result: Result<RunOutcome, gps_core::cli::RunFailure>) -> ExitCode {
    match result {
        Ok(outcome) => {
            println!(
                "{}",
                match outcome {
                    RunOutcome::Converged => "converged",
                    RunOutcome::IterationLimit => "stopped at the iteration limit",
                }
            );
            ExitCode::from(outcome.exit_code())
        }
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(1)
        }
    }
}

fn run(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>, dry_run: bool) -> ExitCode {
    let mut cfg = match ExperimentConfig::load(&config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {}: {e}", config.display());
            return ExitCode::from(1);
        }
    };
    if let Some(seed) = seed {
        cfg.gps.seed = seed;
    }
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    if dry_run {
        return match cfg.to_toml() {
            Ok(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        };
    }
    outcome_code(run_experiment(&cfg))
}

fn eval(policy: PathBuf, config: Option<PathBuf>) -> Result<(), gps_core::Error> {
    let cfg = match config {
        Some(path) => ExperimentConfig::load(&path)?,
        None => ExperimentConfig::default(),
    };
    let net = load_policy(&policy)?;
    let mut errors = Vec::new();
    for (k, fill) in cfg.gps.fills().into_iter().enumerate() {
        let r = policy_rollout(&net, &cfg.sim, &cfg.gps, fill, k as u64)?;
        println!("traj_{k:02} fill {fill:.1} g  error {:.2} g", r.final_error);
        errors.push(r.final_error);
    }
    let (mean, std) = mean_std(&errors);
    let worst = errors.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    println!("mean {mean:.2} g  stddev {std:.2} g  max |error| {worst:.2} g");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            out,
            dry_run,
        } => run(config, seed, out, dry_run),
        Command::Resume { checkpoint, out } => outcome_code(resume_experiment(&checkpoint, out)),
        Command::Eval { policy, config } => match eval(policy, config) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
        Command::Oracle => {
            let results = run_oracles();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if results.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
    }
}
