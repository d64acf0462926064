//! Experiment harness: configuration, run directories, checkpoints and
//! reports.
//!
//! A run directory holds:
//!
//! ```text
//! config.toml                   fully resolved configuration
//! errors.csv                    per-iteration final errors (see `report`)
//! traces/iter_000/traj_KK.csv   PID initialization rollouts
//! traces/iter_III/traj_KK.csv   policy rollouts of outer iteration III
//! checkpoints/iter_III/{policy,dynamics}.bin
//! state.bin                     latest resumable run state
//! policy.bin                    final policy
//! postmortem.txt, postmortem_state.bin   only after a failed iteration
//! ```

pub mod checkpoint;
pub mod config;
pub mod oracle;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::env::write_trace;
use crate::error::{Error, Result};
use crate::gps::{GpsRunner, GpsState, IterationReport, Rollout};

use checkpoint::RunCheckpoint;
use config::ExperimentConfig;

/// How a run ended without error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Converged,
    IterationLimit,
}

impl RunOutcome {
    pub fn exit_code(self) -> u8 {
        match self {
            RunOutcome::Converged => 0,
            RunOutcome::IterationLimit => 2,
        }
    }
}

/// A run that stopped on an error; diagnostics are in the run directory.
#[derive(Debug)]
pub struct RunFailure {
    pub iteration: usize,
    pub error: Error,
    pub postmortem: Option<PathBuf>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "outer iteration {}: {}", self.iteration, self.error)?;
        if let Some(p) = &self.postmortem {
            write!(f, " (post-mortem in {})", p.display())?;
        }
        Ok(())
    }
}

impl std::error::Error for RunFailure {}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        RunFailure {
            iteration: 0,
            error,
            postmortem: None,
        }
    }
}

fn write_traces(dir: &Path, rollouts: &[Rollout]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, r) in rollouts.iter().enumerate() {
        let file = fs::File::create(dir.join(format!("traj_{k:02}.csv")))?;
        write_trace(std::io::BufWriter::new(file), &r.trace)?;
    }
    Ok(())
}

fn write_reports(out: &Path, reports: &[IterationReport]) -> Result<()> {
    let mut buf = Vec::new();
    report::write_csv(&mut buf, reports)?;
    checkpoint::write_atomic(&out.join("errors.csv"), &buf)
}

fn iter_dir(out: &Path, kind: &str, iteration: usize) -> PathBuf {
    out.join(kind).join(format!("iter_{iteration:03}"))
}

/// Creates the run directory and writes the resolved configuration.
pub fn prepare_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    Ok(out)
}

fn run_checkpoint(cfg: &ExperimentConfig, state: &GpsState) -> Result<RunCheckpoint> {
    Ok(RunCheckpoint {
        config_toml: cfg.to_toml()?,
        state: state.clone(),
    })
}

fn postmortem(cfg: &ExperimentConfig, state: &GpsState, iteration: usize, error: &Error) -> Result<PathBuf> {
    let out = &cfg.output_dir;
    let path = out.join("postmortem.txt");
    let mut text = format!(
        "failed during outer iteration {iteration}\nerror: {error}\ndebug: {error:?}\ncompleted iterations: {}\n\n",
        state.iteration
    );
    if !state.reports.is_empty() {
        let mut buf = Vec::new();
        report::write_csv(&mut buf, &state.reports)?;
        text.push_str(&String::from_utf8_lossy(&buf));
    }
    fs::write(&path, text)?;
    checkpoint::save_run(&out.join("postmortem_state.bin"), &run_checkpoint(cfg, state)?)?;
    Ok(path)
}

/// Drives `runner` to completion, writing all artifacts under the
/// configured output directory.
pub fn drive(mut runner: GpsRunner, cfg: &ExperimentConfig) -> std::result::Result<RunOutcome, RunFailure> {
    let out = cfg.output_dir.clone();
    if !runner.initial_rollouts().is_empty() {
        write_traces(&iter_dir(&out, "traces", 0), runner.initial_rollouts())?;
    }
    while !runner.finished() {
        let iteration = runner.state().iteration + 1;
        let step = match runner.step() {
            Ok(step) => step,
            Err(error) => {
                let postmortem = postmortem(cfg, runner.state(), iteration, &error).ok();
                return Err(RunFailure {
                    iteration,
                    error,
                    postmortem,
                });
            }
        };
        let persist = || -> Result<()> {
            write_traces(&iter_dir(&out, "traces", iteration), &step.rollouts)?;
            write_reports(&out, &runner.state().reports)?;
            let every = cfg.checkpoint_every;
            if (every > 0 && iteration.is_multiple_of(every)) || runner.finished() {
                let dir = iter_dir(&out, "checkpoints", iteration);
                fs::create_dir_all(&dir)?;
                checkpoint::save_policy(&dir.join("policy.bin"), &runner.state().policy)?;
                checkpoint::save_models(&dir.join("dynamics.bin"), &step.models)?;
                checkpoint::save_run(&out.join("state.bin"), &run_checkpoint(cfg, runner.state())?)?;
            }
            Ok(())
        };
        persist().map_err(|error| RunFailure {
            iteration,
            error,
            postmortem: None,
        })?;
    }
    checkpoint::save_policy(&out.join("policy.bin"), &runner.state().policy)?;
    let outcome = if runner.converged() {
        RunOutcome::Converged
    } else {
        RunOutcome::IterationLimit
    };
    info!("run finished after {} iterations: {outcome:?}", runner.state().iteration);
    Ok(outcome)
}

/// Runs an experiment from a validated configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> std::result::Result<RunOutcome, RunFailure> {
    cfg.validate()?;
    prepare_run_dir(cfg)?;
    let runner = GpsRunner::new(cfg.gps.clone(), cfg.sim.clone())?;
    drive(runner, cfg)
}

/// Continues a run from a `state.bin` checkpoint. `output_dir` overrides
/// the directory stored in the checkpoint's configuration.
pub fn resume_experiment(
    path: &Path,
    output_dir: Option<PathBuf>,
) -> std::result::Result<RunOutcome, RunFailure> {
    let run = checkpoint::load_run(path)?;
    let mut cfg = ExperimentConfig::from_toml(&run.config_toml)?;
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    prepare_run_dir(&cfg)?;
    let runner = GpsRunner::resume(cfg.gps.clone(), cfg.sim.clone(), run.state)?;
    drive(runner, &cfg)
}
