//! The `train` command.

use std::path::Path;

use rethink_core::telemetry::{export, ExportFormat, RunSummary, Stage};
use rethink_core::trainer::{TrainOutcome, TrainState, Trainer, Variant};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{from_core, CliError, CliResult};
use crate::rundir;

pub const STATE_FILE: &str = "state.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const STAGE1_CHECKPOINT_FILE: &str = "stage1_checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVALS_FILE: &str = "evals.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Headline results written next to the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub seed: u64,
    pub steps: u64,
    pub best_validation: f64,
    pub best_step: u64,
    pub stage1: Option<RunSummary>,
    pub stage2: Option<RunSummary>,
}

/// Trains from scratch, or from `resume` (a state file written after an
/// episode), writing every artifact into `run_dir`.
pub fn train(
    cfg: &RunConfig,
    dataset: rethink_core::trainer::Dataset,
    run_dir: &Path,
    resume: Option<&Path>,
) -> CliResult<TrainSummary> {
    if cfg.train.stage == Stage::Stage2Rethink && cfg.train.variant == Variant::Grpo {
        eprintln!("warning: stage2_rethink with variant grpo runs without selective sample replay");
    }
    let trainer = match resume {
        Some(path) => {
            let state: TrainState = rundir::read_json(path)?;
            Trainer::resume(cfg.train.clone(), dataset, state).map_err(|e| CliError::Data(e.into()))?
        }
        None => Trainer::new(cfg.train.clone(), dataset).map_err(from_core)?,
    };

    let state_path = run_dir.join(STATE_FILE);
    let mut io_error = None;
    let outcome = trainer
        .run(|state| {
            if let Err(e) = rundir::write_json(&state_path, state) {
                io_error = Some(e);
                return Err(rethink_core::Error::Invariant("could not save training state".into()));
            }
            let last = state.log.evals.last().expect("an episode ended");
            eprintln!(
                "{:?} episode {:>4} step {:>6} validation {:.4}",
                state.stage, last.episode, last.step, last.validation_reward
            );
            Ok(())
        })
        .map_err(|e| io_error.take().unwrap_or_else(|| from_core(e)))?;

    write_outputs(cfg, &outcome, run_dir)
}

fn write_outputs(cfg: &RunConfig, outcome: &TrainOutcome, run_dir: &Path) -> CliResult<TrainSummary> {
    rundir::write_records(&run_dir.join(METRICS_FILE), &outcome.log.steps)?;
    rundir::write_records(&run_dir.join(EVALS_FILE), &outcome.log.evals)?;
    let csv = export(&outcome.log.steps, ExportFormat::Csv).map_err(from_core)?;
    rundir::write_text(&run_dir.join(METRICS_CSV), &csv)?;
    rundir::write_json(&run_dir.join(CHECKPOINT_FILE), &outcome.best)?;
    if cfg.train.stage == Stage::Stage2Rethink {
        rundir::write_json(&run_dir.join(STAGE1_CHECKPOINT_FILE), &outcome.stage1_best)?;
    }
    let summary = TrainSummary {
        variant: cfg.train.variant,
        seed: cfg.train.seed,
        steps: outcome.log.steps.last().map_or(0, |m| m.step),
        best_validation: outcome.best.validation_reward,
        best_step: outcome.best.step,
        stage1: RunSummary::of_stage(&outcome.log, Stage::Stage1),
        stage2: RunSummary::of_stage(&outcome.log, Stage::Stage2Rethink),
    };
    rundir::write_json(&run_dir.join(SUMMARY_FILE), &summary)?;

    println!("run        {}", run_dir.display());
    println!("variant    {} (seed {})", cfg.train.variant.name(), cfg.train.seed);
    println!("steps      {}", summary.steps);
    for (name, s) in [("stage1", summary.stage1), ("stage2", summary.stage2)] {
        if let Some(s) = s {
            println!(
                "{name}     final validation {:.4}, best {:.4}, effective ratio {:.3} -> {:.3}",
                s.final_validation, s.best_validation, s.effective_ratio_start, s.effective_ratio_end
            );
        }
    }
    println!(
        "best       validation {:.4} at step {} -> {}",
        summary.best_validation, summary.best_step, CHECKPOINT_FILE
    );
    Ok(summary)
}
