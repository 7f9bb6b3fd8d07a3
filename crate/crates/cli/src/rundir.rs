//! Run directories and file output.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rethink_core::records;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{RunConfig, CONFIG_FILE};
use crate::error::{from_core, Classify, CliResult};

/// Creates the run directory and writes the resolved config into it.
///
/// `explicit` is used as-is (and may already exist); otherwise a fresh
/// directory named by the current time and seed is made under the
/// configured output directory.
pub fn prepare(cfg: &RunConfig, explicit: Option<&Path>) -> CliResult<PathBuf> {
    let dir = match explicit {
        Some(d) => d.to_path_buf(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let base = cfg.output.dir.join(format!("{stamp}-seed{}", cfg.train.seed));
            let mut dir = base.clone();
            let mut n = 2;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{n}", base.display()));
                n += 1;
            }
            dir
        }
    };
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating run directory {}", dir.display()))
        .runtime()?;
    cfg.write(&dir.join(CONFIG_FILE))?;
    Ok(dir)
}

/// Writes a single JSON record, via a temporary file so readers never see
/// a partial write.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    let mut line = records::to_line(value);
    line.push('\n');
    fs::write(&tmp, line)
        .and_then(|_| fs::rename(&tmp, path))
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    records::read_single(path).map_err(from_core)
}

pub fn write_records<T: Serialize>(path: &Path, items: &[T]) -> CliResult<()> {
    records::write_file(path, items).map_err(from_core)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    records::read_file(path).map_err(from_core)
}
