//! Dataset files and the `gen-data` command.

use std::path::Path;

use rethink_core::env::{filter_by_pass_rate, generate_dataset, TaskFeatures};
use rethink_core::policy::Policy;
use rethink_core::rng::derive_stream;
use rethink_core::trainer::Dataset;
use rethink_core::types::{Query, Split};

use crate::config::RunConfig;
use crate::error::{from_core, CliError, CliResult};
use crate::rundir;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const FILTERED_TRAIN_FILE: &str = "train.filtered.jsonl";

/// Reads the three split files from `dir`.
pub fn load(cfg: &RunConfig, dir: &Path) -> CliResult<Dataset> {
    let vocab = cfg.task.vocab().map_err(from_core)?;
    let mut all = Vec::new();
    for name in [TRAIN_FILE, VALIDATION_FILE, EVAL_FILE] {
        let path = dir.join(name);
        if !path.is_file() {
            return Err(CliError::Data(anyhow::anyhow!("missing dataset file {}", path.display())));
        }
        all.extend(rundir::read_records::<Query>(&path)?);
    }
    if let Some(q) = all.iter().find(|q| q.context.iter().chain(&q.truth).any(|t| !vocab.contains(*t))) {
        return Err(CliError::Data(anyhow::anyhow!(
            "query {} uses tokens outside the configured vocabulary of {}",
            q.id,
            vocab.size()
        )));
    }
    Dataset::from_queries(vocab, all).map_err(|e| CliError::Data(e.into()))
}

/// Loads `dir` when given, otherwise generates the dataset from the task spec.
pub fn obtain(cfg: &RunConfig, dir: Option<&Path>) -> CliResult<Dataset> {
    match dir {
        Some(d) => load(cfg, d),
        None => generate(cfg),
    }
}

pub fn generate(cfg: &RunConfig) -> CliResult<Dataset> {
    let vocab = cfg.task.vocab().map_err(from_core)?;
    let queries = generate_dataset(&cfg.task).map_err(from_core)?;
    Dataset::from_queries(vocab, queries).map_err(from_core)
}

/// Writes the splits into `out`; with `filter`, also estimates pass rates
/// of the training queries under the initial policy and writes the kept ones.
pub fn gen_data(cfg: &RunConfig, out: &Path, filter: bool) -> CliResult<()> {
    let data = generate(cfg)?;
    for (name, split, queries) in [
        (TRAIN_FILE, Split::Train, &data.train),
        (VALIDATION_FILE, Split::Validation, &data.validation),
        (EVAL_FILE, Split::Eval, &data.eval),
    ] {
        rundir::write_records(&out.join(name), queries)?;
        println!("{:<10} {:>6} queries -> {}", format!("{split:?}").to_lowercase(), queries.len(), name);
    }
    if filter {
        let features = TaskFeatures::new(data.vocab, data.context_len(), cfg.train.hash_buckets);
        let params = features.format_prior(&cfg.train.prior);
        let policy = Policy::new(&params, &features).with_terminator(data.vocab.terminator());
        let kept = filter_by_pass_rate(
            &data.vocab,
            &data.train,
            policy,
            cfg.filter.n_samples,
            (cfg.filter.keep_lo, cfg.filter.keep_hi),
            cfg.train.max_len,
            &derive_stream(cfg.task.seed, "filter", 0),
        )
        .map_err(from_core)?;
        rundir::write_records(&out.join(FILTERED_TRAIN_FILE), &kept)?;
        println!(
            "filter     {:>6} of {} kept ({:.4}) with {} samples, pass rate in [{}, {}] -> {}",
            kept.len(),
            data.train.len(),
            kept.len() as f64 / data.train.len() as f64,
            cfg.filter.n_samples,
            cfg.filter.keep_lo,
            cfg.filter.keep_hi,
            FILTERED_TRAIN_FILE
        );
    }
    Ok(())
}
