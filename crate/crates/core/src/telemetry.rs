//! Training-dynamics metrics: effective-query ratio, batch advantage
//! histograms, evaluation curves and rethinking ratio, plus CSV, record and
//! SVG export.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{effective_ratio, LossReport, TrainPair};
use crate::types::Group;

pub const HIST_BINS: usize = 21;
pub const HIST_RANGE: f64 = 2.5;
/// Interior bins plus underflow (first) and overflow (last).
pub const HIST_SLOTS: usize = HIST_BINS + 2;

/// Slot of `value` in the fixed advantage histogram.
pub fn histogram_slot(value: f64) -> usize {
    if value < -HIST_RANGE {
        return 0;
    }
    if value > HIST_RANGE {
        return HIST_SLOTS - 1;
    }
    let width = 2.0 * HIST_RANGE / HIST_BINS as f64;
    1 + (((value + HIST_RANGE) / width).floor() as usize).min(HIST_BINS - 1)
}

/// Slot containing zero.
pub fn zero_slot() -> usize {
    histogram_slot(0.0)
}

pub fn advantage_histogram(advantages: impl IntoIterator<Item = f64>) -> Vec<u64> {
    let mut counts = vec![0u64; HIST_SLOTS];
    for a in advantages {
        counts[histogram_slot(a)] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2Rethink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub stage: Stage,
    pub effective_query_ratio: f64,
    pub groups: usize,
    pub batch_pairs: usize,
    pub replayed_pairs: usize,
    pub mean_reward: f64,
    pub objective: f64,
    pub aux_loss: f64,
    pub clip_fraction: f64,
    pub kl_estimate: f64,
    pub mean_ratio: f64,
    pub advantage_histogram: Vec<u64>,
    pub rethinking_ratio: Option<f64>,
    pub buffer_size: usize,
    pub skipped: bool,
}

impl StepMetrics {
    /// Fraction of batch mass outside the zero-containing bin.
    pub fn spread(&self) -> Option<f64> {
        let total: u64 = self.advantage_histogram.iter().sum();
        if total == 0 {
            return None;
        }
        Some(1.0 - self.advantage_histogram[zero_slot()] as f64 / total as f64)
    }
}

/// Inputs gathered by the trainer for one step.
pub struct StepRecord<'a> {
    pub step: u64,
    pub stage: Stage,
    pub groups: &'a [Group],
    pub batch: &'a [TrainPair],
    pub replayed: usize,
    pub loss: &'a LossReport,
    pub aux_loss: f64,
    pub rethinking_ratio: Option<f64>,
    pub buffer_size: usize,
    pub skipped: bool,
}

pub fn record_step(rec: StepRecord<'_>) -> StepMetrics {
    let rollouts: Vec<f64> = rec.groups.iter().flat_map(|g| g.rollouts.iter().map(|r| r.reward)).collect();
    let mean_reward = if rollouts.is_empty() {
        0.0
    } else {
        rollouts.iter().sum::<f64>() / rollouts.len() as f64
    };
    StepMetrics {
        step: rec.step,
        stage: rec.stage,
        effective_query_ratio: effective_ratio(rec.groups),
        groups: rec.groups.len(),
        batch_pairs: rec.batch.len(),
        replayed_pairs: rec.replayed,
        mean_reward,
        objective: rec.loss.objective_value,
        aux_loss: rec.aux_loss,
        clip_fraction: rec.loss.clip_fraction,
        kl_estimate: rec.loss.kl_estimate,
        mean_ratio: rec.loss.mean_ratio,
        advantage_histogram: advantage_histogram(rec.batch.iter().map(|p| p.advantage)),
        rethinking_ratio: rec.rethinking_ratio,
        buffer_size: rec.buffer_size,
        skipped: rec.skipped,
    }
}

/// Validation evaluation recorded at an episode boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: u64,
    pub stage: Stage,
    pub episode: u64,
    pub validation_reward: f64,
}

/// Append-only log of step metrics and validation evaluations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepMetrics>,
    pub evals: Vec<EvalPoint>,
}

impl RunLog {
    pub fn push_step(&mut self, m: StepMetrics) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if m.step <= last.step {
                return Err(Error::Invariant(format!(
                    "step {} appended after step {}",
                    m.step, last.step
                )));
            }
        }
        self.steps.push(m);
        Ok(())
    }

    pub fn push_eval(&mut self, e: EvalPoint) {
        self.evals.push(e);
    }
}

/// Mean over the window of [`StepMetrics::spread`], skipping empty batches.
/// Higher means the batch advantage mass is less concentrated at zero.
pub fn histogram_spread(window: &[StepMetrics]) -> f64 {
    let spreads: Vec<f64> = window.iter().filter_map(StepMetrics::spread).collect();
    if spreads.is_empty() {
        return 0.0;
    }
    spreads.iter().sum::<f64>() / spreads.len() as f64
}

/// Steps averaged for the start and end of a run.
pub const EDGE_STEPS: usize = 5;

/// Headline numbers of one stage of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    /// Validation reward at the last evaluation.
    pub final_validation: f64,
    pub best_validation: f64,
    /// Mean effective-query ratio over the first [`EDGE_STEPS`] steps.
    pub effective_ratio_start: f64,
    /// Mean effective-query ratio over the last [`EDGE_STEPS`] steps.
    pub effective_ratio_end: f64,
    /// [`histogram_spread`] over the last third of the steps.
    pub spread_last_third: f64,
}

impl RunSummary {
    /// Summary of the `stage` portion of `log`; `None` if it has no steps
    /// or no evaluations.
    pub fn of_stage(log: &RunLog, stage: Stage) -> Option<RunSummary> {
        let steps: Vec<StepMetrics> = log.steps.iter().filter(|m| m.stage == stage).cloned().collect();
        let evals: Vec<f64> = log
            .evals
            .iter()
            .filter(|e| e.stage == stage)
            .map(|e| e.validation_reward)
            .collect();
        if steps.is_empty() || evals.is_empty() {
            return None;
        }
        let mean_ratio = |w: &[StepMetrics]| w.iter().map(|m| m.effective_query_ratio).sum::<f64>() / w.len() as f64;
        let edge = EDGE_STEPS.min(steps.len());
        Some(RunSummary {
            steps: steps.len(),
            final_validation: *evals.last().expect("non-empty"),
            best_validation: evals.iter().copied().fold(f64::MIN, f64::max),
            effective_ratio_start: mean_ratio(&steps[..edge]),
            effective_ratio_end: mean_ratio(&steps[steps.len() - edge..]),
            spread_last_third: histogram_spread(&steps[steps.len() - steps.len().div_ceil(3)..]),
        })
    }

    /// End-of-run effective ratio relative to its start.
    pub fn effective_ratio_drop(&self) -> f64 {
        if self.effective_ratio_start == 0.0 {
            return 1.0;
        }
        self.effective_ratio_end / self.effective_ratio_start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    EffectiveQueryRatio,
    MeanReward,
    RethinkingRatio,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::EffectiveQueryRatio => "effective_query_ratio",
            Metric::MeanReward => "mean_reward",
            Metric::RethinkingRatio => "rethinking_ratio",
        }
    }

    pub fn value(self, m: &StepMetrics) -> Option<f64> {
        match self {
            Metric::EffectiveQueryRatio => Some(m.effective_query_ratio),
            Metric::MeanReward => Some(m.mean_reward),
            Metric::RethinkingRatio => m.rethinking_ratio,
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "effective_query_ratio" => Ok(Metric::EffectiveQueryRatio),
            "mean_reward" => Ok(Metric::MeanReward),
            "rethinking_ratio" => Ok(Metric::RethinkingRatio),
            other => Err(Error::UnknownMetric(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Records,
    Csv,
    SvgPlot(Metric),
}

pub const CSV_HEADER: &str = "step,stage,effective_query_ratio,groups,batch_pairs,replayed_pairs,mean_reward,objective,aux_loss,clip_fraction,kl_estimate,mean_ratio,zero_bin_mass,rethinking_ratio,buffer_size,skipped";

pub fn to_csv(steps: &[StepMetrics]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for m in steps {
        let total: u64 = m.advantage_histogram.iter().sum();
        let zero_mass = if total == 0 {
            0.0
        } else {
            m.advantage_histogram[zero_slot()] as f64 / total as f64
        };
        let stage = match m.stage {
            Stage::Stage1 => "stage1",
            Stage::Stage2Rethink => "stage2_rethink",
        };
        let rr = m.rethinking_ratio.map(|r| r.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            m.step,
            stage,
            m.effective_query_ratio,
            m.groups,
            m.batch_pairs,
            m.replayed_pairs,
            m.mean_reward,
            m.objective,
            m.aux_loss,
            m.clip_fraction,
            m.kl_estimate,
            m.mean_ratio,
            zero_mass,
            rr,
            m.buffer_size,
            m.skipped
        );
    }
    out
}

/// One labelled series of `(x, y)` points for [`svg_chart`].
pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 40.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Deterministic line chart over a fixed 800×400 viewport.
pub fn svg_chart(title: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (mut x_min, mut x_max) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if !x_min.is_finite() {
        (x_min, x_max) = (0.0, 1.0);
    }
    if x_max <= x_min {
        x_max = x_min + 1.0;
    }
    let y_hi = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .fold(1.0f64, f64::max);
    let (y_min, y_max) = (0.0, y_hi);
    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = |y: f64| MARGIN_T + plot_h - (y - y_min) / (y_max - y_min) * plot_h;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="800" height="400" viewBox="0 0 800 400" font-family="monospace" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="800" height="400" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{:.1}" y="18" font-size="13">{}</text>"#, MARGIN_L, escape(title));
    let _ = writeln!(
        out,
        r##"<g stroke="#444" stroke-width="1"><line x1="{l:.1}" y1="{b:.1}" x2="{r:.1}" y2="{b:.1}"/><line x1="{l:.1}" y1="{t:.1}" x2="{l:.1}" y2="{b:.1}"/></g>"##,
        l = MARGIN_L,
        r = MARGIN_L + plot_w,
        t = MARGIN_T,
        b = MARGIN_T + plot_h
    );
    for i in 0..=4 {
        let y = y_min + (y_max - y_min) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{:.2}</text>"##,
            MARGIN_L,
            MARGIN_L + plot_w,
            MARGIN_L - 6.0,
            sy(y) + 4.0,
            y,
            py = sy(y)
        );
        let x = x_min + (x_max - x_min) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}</text>"#,
            sx(x),
            MARGIN_T + plot_h + 16.0,
            x
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">step</text>"#,
        MARGIN_L + plot_w / 2.0,
        SVG_H - 6.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = MARGIN_T + 14.0 * (i as f64 + 1.0);
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            SVG_W - MARGIN_R + 10.0,
            SVG_W - MARGIN_R + 30.0,
            SVG_W - MARGIN_R + 36.0,
            ly + 4.0,
            escape(s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn svg_plot(steps: &[StepMetrics], metric: Metric) -> String {
    let points = steps
        .iter()
        .filter_map(|m| metric.value(m).map(|v| (m.step as f64, v)))
        .collect();
    svg_chart(
        &format!("{} vs step", metric.name()),
        metric.name(),
        &[Series {
            label: metric.name(),
            points,
        }],
    )
}

/// Renders the step log in `format`.
pub fn export(steps: &[StepMetrics], format: ExportFormat) -> Result<String> {
    if steps.is_empty() {
        return Err(Error::EmptyLog);
    }
    Ok(match format {
        ExportFormat::Records => crate::records::encode(steps),
        ExportFormat::Csv => to_csv(steps),
        ExportFormat::SvgPlot(metric) => svg_plot(steps, metric),
    })
}
