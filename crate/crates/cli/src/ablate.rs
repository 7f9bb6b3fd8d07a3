//! The `ablate` command: every variant on every seed, side by side.

use std::fmt::Write as _;
use std::path::Path;

use rethink_core::telemetry::{svg_chart, RunSummary, Series, Stage};
use rethink_core::trainer::{run_training, Dataset, Variant};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data;
use crate::error::{from_core, CliError, CliResult};
use crate::rundir;

pub const TABLE_CSV: &str = "ablation.csv";
pub const TABLE_TXT: &str = "ablation.txt";
pub const RATIO_SVG: &str = "effective_query_ratio.svg";
pub const VALIDATION_SVG: &str = "validation_reward.svg";

/// One (variant, seed) run of the ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationReport {
    pub fn rows_for(&self, variant: Variant) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(move |r| r.variant == variant)
    }

    pub fn median_final(&self, variant: Variant) -> f64 {
        median(&self.rows_for(variant).map(|r| r.summary.final_validation).collect::<Vec<_>>())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "variant,seed,final_validation,best_validation,effective_ratio_start,effective_ratio_end,spread_last_third\n",
        );
        for r in &self.rows {
            let s = &r.summary;
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.variant.name(),
                r.seed,
                s.final_validation,
                s.best_validation,
                s.effective_ratio_start,
                s.effective_ratio_end,
                s.spread_last_third
            )
            .unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>6} {:>10} {:>10} {:>10} {:>10} {:>8}\n",
            "variant", "seed", "final", "best", "eff_start", "eff_end", "spread"
        );
        for r in &self.rows {
            let s = &r.summary;
            writeln!(
                out,
                "{:<12} {:>6} {:>10.4} {:>10.4} {:>10.3} {:>10.3} {:>8.3}",
                r.variant.name(),
                r.seed,
                s.final_validation,
                s.best_validation,
                s.effective_ratio_start,
                s.effective_ratio_end,
                s.spread_last_third
            )
            .unwrap();
        }
        out.push('\n');
        for v in Variant::ALL {
            writeln!(out, "median final validation {:<12} {:.4}", v.name(), self.median_final(v)).unwrap();
        }
        out
    }
}

/// Per-step mean across seeds of `value`, truncated to the shortest run.
fn mean_curve(runs: &[Vec<(f64, f64)>]) -> Vec<(f64, f64)> {
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let y = runs.iter().map(|r| r[i].1).sum::<f64>() / runs.len() as f64;
            (runs[0][i].0, y)
        })
        .collect()
}

/// Runs stage 1 of every variant for every configured seed.
pub fn ablate(cfg: &RunConfig, data_dir: Option<&Path>, run_dir: &Path) -> CliResult<AblationReport> {
    let mut rows = Vec::new();
    let mut ratio_curves: Vec<Vec<Vec<(f64, f64)>>> = vec![Vec::new(); Variant::ALL.len()];
    let mut eval_curves: Vec<Vec<Vec<(f64, f64)>>> = vec![Vec::new(); Variant::ALL.len()];
    for &seed in &cfg.ablate.seeds {
        let mut seeded = cfg.clone();
        if cfg.ablate.reseed_task {
            seeded.task.seed = seed;
        }
        let dataset: Dataset = data::obtain(&seeded, data_dir)?;
        for (vi, variant) in Variant::ALL.into_iter().enumerate() {
            let mut train = seeded.train.clone();
            train.variant = variant;
            train.stage = Stage::Stage1;
            train.seed = seed;
            let outcome = run_training(train, dataset.clone()).map_err(from_core)?;
            let summary = RunSummary::of_stage(&outcome.log, Stage::Stage1)
                .ok_or_else(|| CliError::Runtime(anyhow::anyhow!("run produced no metrics")))?;
            eprintln!(
                "seed {seed} {:<12} final {:.4} effective ratio {:.3} -> {:.3}",
                variant.name(),
                summary.final_validation,
                summary.effective_ratio_start,
                summary.effective_ratio_end
            );
            rundir::write_records(
                &run_dir.join("metrics").join(format!("{}-seed{seed}.jsonl", variant.name())),
                &outcome.log.steps,
            )?;
            ratio_curves[vi].push(
                outcome
                    .log
                    .steps
                    .iter()
                    .map(|m| (m.step as f64, m.effective_query_ratio))
                    .collect(),
            );
            eval_curves[vi].push(
                outcome
                    .log
                    .evals
                    .iter()
                    .map(|e| (e.step as f64, e.validation_reward))
                    .collect(),
            );
            rows.push(AblationRow { variant, seed, summary });
        }
    }
    let report = AblationReport { rows };

    for (file, title, label, curves) in [
        (RATIO_SVG, "Effective query ratio (mean over seeds)", "effective query ratio", &ratio_curves),
        (VALIDATION_SVG, "Validation pass@1 (mean over seeds)", "validation reward", &eval_curves),
    ] {
        let series: Vec<Series<'_>> = Variant::ALL
            .iter()
            .zip(curves.iter())
            .map(|(v, runs)| Series {
                label: v.name(),
                points: mean_curve(runs),
            })
            .collect();
        rundir::write_text(&run_dir.join(file), &svg_chart(title, label, &series))?;
    }
    rundir::write_text(&run_dir.join(TABLE_CSV), &report.to_csv())?;
    let table = report.to_table();
    rundir::write_text(&run_dir.join(TABLE_TXT), &table)?;
    rundir::write_json(&run_dir.join("ablation.json"), &report)?;
    print!("{table}");
    Ok(report)
}
