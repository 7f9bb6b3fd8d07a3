//! `rethink-lab`: dataset generation, training, ablation sweeps, rethinking
//! evaluation and plot export for the GRPO / selective-sample-replay /
//! forced-rethinking toolkit.

pub mod ablate;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod rundir;
pub mod train;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rethink_core::rethink::EvalMode;
use rethink_core::telemetry::{svg_chart, to_csv, Metric, Series, StepMetrics};
use rethink_core::trainer::Checkpoint;

use crate::config::{resolve, Override, RunConfig, CONFIG_FILE, OUT_DIR_ENV, THREADS_ENV};
use crate::error::{from_core, Classify, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "rethink-lab", version, about)]
#[command(after_help = "Any config key can be overridden as --section.key VALUE, e.g. --train.lr 0.1")]
pub struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Write outputs here instead of a fresh timestamped directory.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,

    /// Parent directory for timestamped run directories.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    pub out_dir: Option<PathBuf>,

    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Off,
    Forced,
    Bound,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Off => EvalMode::Off,
            ModeArg::Forced => EvalMode::Forced,
            ModeArg::Bound => EvalMode::Bound,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotFormat {
    Svg,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train / validation / eval splits.
    GenData {
        /// Also filter the training split by pass rate under the initial policy.
        #[arg(long)]
        filter: bool,
    },
    /// Train one policy and write its best checkpoint and metrics.
    Train {
        /// Directory holding dataset files; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Shorthand for --train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Shorthand for --train.variant (grpo, grpo_filter, grpo_ssr).
        #[arg(long)]
        variant: Option<String>,
        /// Shorthand for --train.stage (stage1, stage2_rethink).
        #[arg(long)]
        stage: Option<String>,
    },
    /// Train every variant on every configured seed and compare.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to eval.mode from the config.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Export step metrics as an SVG chart or CSV.
    Plot {
        /// One or more metrics.jsonl files; several are overlaid.
        #[arg(long, required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value = "effective_query_ratio")]
        metric: String,
        #[arg(long, value_enum, default_value = "svg")]
        format: PlotFormat,
        /// Output file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// The config file next to `path`, if there is one.
fn sibling_config(path: &Path) -> Option<PathBuf> {
    let c = path.parent()?.join(CONFIG_FILE);
    c.is_file().then_some(c)
}

fn config_for(cli: &Cli, fallback: Option<PathBuf>, overrides: &[Override]) -> CliResult<RunConfig> {
    let path = cli.config.clone().or(fallback);
    let mut cfg = resolve(path.as_deref(), overrides)?;
    if let Some(dir) = &cli.out_dir {
        cfg.output.dir = dir.clone();
    }
    Ok(cfg)
}

/// Sizes the global worker pool. Results do not depend on the count.
pub fn init_threads(threads: Option<usize>) -> CliResult<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config(anyhow::anyhow!("--threads must be >= 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().runtime()?;
    }
    Ok(())
}

/// Runs the parsed command.
pub fn run(cli: Cli, mut overrides: Vec<Override>) -> CliResult<()> {
    init_threads(cli.threads)?;
    match &cli.command {
        Command::GenData { filter } => {
            let cfg = config_for(&cli, None, &overrides)?;
            let dir = rundir::prepare(&cfg, cli.run_dir.as_deref())?;
            data::gen_data(&cfg, &dir, *filter)
        }
        Command::Train {
            data: data_dir,
            resume,
            seed,
            variant,
            stage,
        } => {
            for (key, value) in [
                ("train.seed", seed.map(|s| s.to_string())),
                ("train.variant", variant.clone()),
                ("train.stage", stage.clone()),
            ] {
                if let Some(v) = value {
                    overrides.push(Override::new(key, &v).config()?);
                }
            }
            let fallback = resume.as_deref().and_then(sibling_config);
            let cfg = config_for(&cli, fallback, &overrides)?;
            let dataset = data::obtain(&cfg, data_dir.as_deref())?;
            let explicit = cli
                .run_dir
                .clone()
                .or_else(|| resume.as_deref().and_then(Path::parent).map(Path::to_path_buf));
            let dir = rundir::prepare(&cfg, explicit.as_deref())?;
            train::train(&cfg, dataset, &dir, resume.as_deref()).map(|_| ())
        }
        Command::Ablate { data: data_dir } => {
            let cfg = config_for(&cli, None, &overrides)?;
            let dir = rundir::prepare(&cfg, cli.run_dir.as_deref())?;
            ablate::ablate(&cfg, data_dir.as_deref(), &dir).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            mode,
            data: data_dir,
        } => {
            let cfg = config_for(&cli, sibling_config(checkpoint), &overrides)?;
            let ckpt: Checkpoint = rundir::read_json(checkpoint)?;
            let dataset = data::obtain(&cfg, data_dir.as_deref())?;
            let dir = rundir::prepare(&cfg, cli.run_dir.as_deref())?;
            let mode = mode.map_or(cfg.eval.mode, EvalMode::from);
            eval::eval(&cfg, &dataset, &ckpt, mode, &dir).map(|_| ())
        }
        Command::Plot {
            metrics,
            metric,
            format,
            out,
        } => plot(metrics, metric, *format, out.as_deref()),
    }
}

fn plot(files: &[PathBuf], metric: &str, format: PlotFormat, out: Option<&Path>) -> CliResult<()> {
    let metric: Metric = metric.parse().map_err(from_core)?;
    let logs: Vec<Vec<StepMetrics>> = files
        .iter()
        .map(|f| rundir::read_records(f))
        .collect::<CliResult<_>>()?;
    if logs.iter().any(Vec::is_empty) {
        return Err(CliError::Data(anyhow::anyhow!("a metrics file has no steps")));
    }
    let text = match format {
        PlotFormat::Csv if logs.len() == 1 => to_csv(&logs[0]),
        PlotFormat::Csv => {
            return Err(CliError::Config(anyhow::anyhow!("CSV export takes exactly one metrics file")));
        }
        PlotFormat::Svg => {
            let labels: Vec<String> = files.iter().map(|f| series_label(f)).collect();
            let series: Vec<Series<'_>> = logs
                .iter()
                .zip(&labels)
                .map(|(steps, label)| Series {
                    label,
                    points: steps
                        .iter()
                        .filter_map(|m| metric.value(m).map(|y| (m.step as f64, y)))
                        .collect(),
                })
                .collect();
            svg_chart(metric.name(), metric.name(), &series)
        }
    };
    match out {
        Some(path) => rundir::write_text(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// `run-dir/metrics.jsonl` is labelled by its directory, other files by stem.
fn series_label(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
    match (stem, path.parent().and_then(Path::file_name).and_then(|s| s.to_str())) {
        ("metrics", Some(dir)) => dir.to_string(),
        _ => stem.to_string(),
    }
}
