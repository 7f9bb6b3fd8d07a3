//! The `eval` command: greedy pass@1 with rethinking off, forced or bound.

use std::path::Path;

use rethink_core::env::TaskFeatures;
use rethink_core::policy::Policy;
use rethink_core::rethink::{by_difficulty, evaluate, summarize, EvalMode, ModeReport, TriggerCatalog};
use rethink_core::trainer::{Checkpoint, Dataset};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::rundir;

pub const RECORDS_FILE: &str = "eval_records.jsonl";
pub const REPORT_FILE: &str = "eval_report.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyRow {
    pub difficulty: f64,
    pub queries: usize,
    pub accuracy: f64,
    pub rethinking_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub checkpoint_step: u64,
    pub modes: Vec<ModeReport>,
    /// Per-difficulty rows for `mode`.
    pub by_difficulty: Vec<DifficultyRow>,
}

impl EvalReport {
    pub fn accuracy(&self, mode: EvalMode) -> f64 {
        self.modes.iter().find(|m| m.mode == mode).map_or(f64::NAN, |m| m.accuracy)
    }
}

/// Evaluates `checkpoint` on the eval split, writing per-query records and
/// the report into `run_dir`.
pub fn eval(
    cfg: &RunConfig,
    dataset: &Dataset,
    checkpoint: &Checkpoint,
    mode: EvalMode,
    run_dir: &Path,
) -> CliResult<EvalReport> {
    let features = TaskFeatures::new(dataset.vocab, dataset.context_len(), cfg.train.hash_buckets);
    let expected = dataset.vocab.size() * rethink_core::policy::FeatureMap::dim(&features);
    if checkpoint.params.theta.len() != expected {
        return Err(CliError::Data(anyhow::anyhow!(
            "checkpoint has {} parameters but the config and dataset imply {}",
            checkpoint.params.theta.len(),
            expected
        )));
    }
    if dataset.eval.is_empty() {
        return Err(CliError::Data(anyhow::anyhow!("dataset has no eval split")));
    }
    let policy = Policy::new(&checkpoint.params, &features).with_terminator(dataset.vocab.terminator());
    let outcomes = evaluate(
        policy,
        &dataset.vocab,
        &dataset.eval,
        &TriggerCatalog::standard(&dataset.vocab),
        cfg.train.max_len,
        cfg.train.rethink.y2_budget,
    );
    let report = EvalReport {
        mode,
        checkpoint_step: checkpoint.step,
        modes: [EvalMode::Off, EvalMode::Forced, EvalMode::Bound]
            .into_iter()
            .map(|m| summarize(&outcomes, m))
            .collect(),
        by_difficulty: by_difficulty(&outcomes, mode)
            .into_iter()
            .map(|(difficulty, queries, accuracy, rethinking_ratio)| DifficultyRow {
                difficulty,
                queries,
                accuracy,
                rethinking_ratio,
            })
            .collect(),
    };
    rundir::write_records(&run_dir.join(RECORDS_FILE), &outcomes)?;
    rundir::write_json(&run_dir.join(REPORT_FILE), &report)?;

    let chosen = report.modes.iter().find(|m| m.mode == mode).expect("all modes reported");
    println!(
        "mode {:?}: pass@1 {:.4} on {} queries, rethinking ratio {:.4}",
        mode, chosen.accuracy, chosen.queries, chosen.rethinking_ratio
    );
    println!("{:>10} {:>8} {:>10} {:>10}", "difficulty", "queries", "accuracy", "rethink");
    for r in &report.by_difficulty {
        println!(
            "{:>10.2} {:>8} {:>10.4} {:>10.4}",
            r.difficulty, r.queries, r.accuracy, r.rethinking_ratio
        );
    }
    Ok(report)
}
