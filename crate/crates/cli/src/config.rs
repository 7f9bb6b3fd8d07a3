//! The run configuration document.
//!
//! A TOML file with one section per concern. Values missing from the file
//! fall back to the built-in defaults (the reference benchmark), and any
//! `section.key` can be overridden from the command line. Unknown keys are
//! rejected.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use rethink_core::env::{TaskSpec, DEFAULT_FILTER_SAMPLES, DEFAULT_KEEP_RANGE};
use rethink_core::reference;
use rethink_core::rethink::EvalMode;
use rethink_core::telemetry::Stage;
use rethink_core::trainer::{TrainConfig, Variant};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Classify, CliResult};

pub const OUT_DIR_ENV: &str = "RETHINK_LAB_OUT_DIR";
pub const THREADS_ENV: &str = "RETHINK_LAB_THREADS";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Parent directory of run directories.
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub n_samples: usize,
    pub keep_lo: f64,
    pub keep_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    /// Also use each seed as the task seed, so every seed gets its own dataset.
    pub reseed_task: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub train: TrainConfig,
    pub filter: FilterConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: reference::task_spec(0),
            train: reference::train_config(Variant::GrpoSsr, Stage::Stage1, 0),
            filter: FilterConfig {
                n_samples: DEFAULT_FILTER_SAMPLES,
                keep_lo: DEFAULT_KEEP_RANGE.0,
                keep_hi: DEFAULT_KEEP_RANGE.1,
            },
            eval: EvalConfig { mode: EvalMode::Off },
            ablate: AblateConfig {
                seeds: reference::SEEDS.to_vec(),
                reseed_task: true,
            },
            output: OutputConfig { dir: PathBuf::from("runs") },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        let f = &self.filter;
        if f.n_samples == 0 || !(0.0 <= f.keep_lo && f.keep_lo <= f.keep_hi && f.keep_hi <= 1.0) {
            bail!("filter needs n_samples >= 1 and 0 <= keep_lo <= keep_hi <= 1");
        }
        if self.ablate.seeds.is_empty() {
            bail!("ablate.seeds is empty");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        fs::write(path, self.to_toml())
            .with_context(|| format!("writing {}", path.display()))
            .runtime()
    }
}

/// A `section.key = value` override from the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl Override {
    /// Parses `raw` as a TOML value, falling back to a plain string.
    pub fn new(key: &str, raw: &str) -> anyhow::Result<Self> {
        let path: Vec<String> = key.split('.').map(str::to_string).collect();
        if path.iter().any(String::is_empty) {
            bail!("malformed override key `{key}`");
        }
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        Ok(Override { path, value })
    }
}

/// Splits `--section.key value` and `--section.key=value` pairs out of
/// `args`; everything else is returned untouched for the argument parser.
pub fn extract_overrides(args: Vec<String>) -> anyhow::Result<(Vec<String>, Vec<Override>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (key, inline) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        let raw = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| anyhow!("override --{key} needs a value"))?,
        };
        overrides.push(Override::new(&key, &raw)?);
    }
    Ok((rest, overrides))
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> anyhow::Result<()> {
    let (last, parents) = path.split_last().expect("override paths are non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.clone()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{}` is not a section", path.join(".")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Defaults, then the file at `path` (if any), then `overrides`.
pub fn resolve(path: Option<&Path>, overrides: &[Override]) -> CliResult<RunConfig> {
    let mut table = Table::try_from(RunConfig::default()).expect("defaults serialize");
    if let Some(path) = path {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .config()?;
        let file: Table = text
            .parse()
            .with_context(|| format!("parsing config {}", path.display()))
            .config()?;
        merge(&mut table, file);
    }
    for o in overrides {
        set_path(&mut table, &o.path, o.value.clone()).config()?;
    }
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .context("invalid configuration")
        .config()?;
    cfg.validate().config()?;
    Ok(cfg)
}
