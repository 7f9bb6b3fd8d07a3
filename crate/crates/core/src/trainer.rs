//! The two-stage training loop: near-on-policy episodes, parallel group
//! collection, variant-specific batch composition, optimizer updates and
//! checkpoint selection on validation reward.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{verify, FormatPrior, TaskFeatures};
use crate::error::{Error, Result};
use crate::grpo::{compute_advantages_with_floor, surrogate_objective, ClipConfig, LossReport, TrainPair};
use crate::optim::{Optimizer, OptimizerKind};
use crate::policy::{Policy, PolicyParams};
use crate::rethink::{aux_nll_loss, detect_spontaneous, force_rethink, select_for_rethink, RethinkConfig, TriggerCatalog};
use crate::rng::{derive_stream, RandomStream};
use crate::ssr::{compose_batch, ReplayBuffer, ReplayConfig};
use crate::telemetry::{record_step, EvalPoint, RunLog, Stage, StepMetrics, StepRecord};
use crate::types::{Group, Query, Split, TriggerCategory, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Grpo,
    GrpoFilter,
    GrpoSsr,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Grpo, Variant::GrpoFilter, Variant::GrpoSsr];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Grpo => "grpo",
            Variant::GrpoFilter => "grpo_filter",
            Variant::GrpoSsr => "grpo_ssr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub stage: Stage,
    /// Group size `G`.
    pub group_size: usize,
    pub target_pairs: usize,
    pub episode_queries: usize,
    pub queries_per_step: usize,
    pub epochs_max: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub clip: ClipConfig,
    pub ssr: ReplayConfig,
    pub rethink: RethinkConfig,
    /// Token budget of a sampled response.
    pub max_len: usize,
    pub seed: u64,
    pub prior: FormatPrior,
    pub hash_buckets: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::GrpoSsr,
            stage: Stage::Stage1,
            group_size: 8,
            target_pairs: 64,
            episode_queries: 128,
            queries_per_step: 16,
            epochs_max: 3,
            lr: 1e-2,
            optimizer: OptimizerKind::AdaptiveMoment,
            clip: ClipConfig::default(),
            ssr: ReplayConfig::default(),
            rethink: RethinkConfig::default(),
            max_len: 8,
            seed: 0,
            prior: FormatPrior::default(),
            hash_buckets: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if self.episode_queries == 0 || self.queries_per_step == 0 {
            return bad("episode_queries and queries_per_step must be >= 1");
        }
        if self.epochs_max == 0 {
            return bad("epochs_max must be >= 1");
        }
        if self.target_pairs == 0 {
            return bad("target_pairs must be >= 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.max_len == 0 || self.hash_buckets == 0 {
            return bad("max_len and hash_buckets must be >= 1");
        }
        if !(self.ssr.alpha >= 0.0) {
            return bad("ssr.alpha must be >= 0");
        }
        self.clip.validate()?;
        self.rethink.validate()?;
        if self.stage == Stage::Stage2Rethink && !(self.rethink.q > 0.0 && self.rethink.q < 1.0) {
            return bad("rethink.q must lie in (0, 1) for stage2_rethink");
        }
        Ok(())
    }

    pub fn steps_per_episode(&self) -> usize {
        self.episode_queries.div_ceil(self.queries_per_step)
    }

    pub fn replay_capacity(&self) -> usize {
        self.ssr.capacity.unwrap_or(4 * self.target_pairs)
    }

    pub fn replay_persist_steps(&self) -> u64 {
        self.ssr.persist_steps.unwrap_or(self.steps_per_episode() as u64)
    }
}

/// Queries split by role.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub train: Vec<Query>,
    pub validation: Vec<Query>,
    pub eval: Vec<Query>,
}

impl Dataset {
    pub fn from_queries(vocab: Vocab, queries: Vec<Query>) -> Result<Self> {
        let mut d = Dataset {
            vocab,
            train: Vec::new(),
            validation: Vec::new(),
            eval: Vec::new(),
        };
        for q in queries {
            q.validate()?;
            match q.split {
                Split::Train => d.train.push(q),
                Split::Validation => d.validation.push(q),
                Split::Eval => d.eval.push(q),
            }
        }
        if d.train.is_empty() || d.validation.is_empty() {
            return Err(Error::InvalidTaskSpec("dataset needs train and validation queries".into()));
        }
        Ok(d)
    }

    pub fn context_len(&self) -> usize {
        self.train
            .iter()
            .chain(&self.validation)
            .chain(&self.eval)
            .map(|q| q.context.len())
            .max()
            .unwrap_or(0)
    }
}

/// A policy selected on validation reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub stage: Stage,
    pub step: u64,
    pub episode: u64,
    pub validation_reward: f64,
    pub metrics: Option<StepMetrics>,
}

/// Everything needed to continue a run bit-exactly from an episode boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: PolicyParams,
    pub behavior: PolicyParams,
    pub optimizer: Optimizer,
    pub buffer: ReplayBuffer,
    pub stage: Stage,
    pub epoch: usize,
    /// Next episode index within the current epoch.
    pub episode_in_epoch: usize,
    /// Episodes completed in the current stage.
    pub episodes_done: u64,
    /// Last step taken (0 before the first).
    pub step: u64,
    pub best: Option<Checkpoint>,
    pub stage1_best: Option<Checkpoint>,
    pub finished: bool,
    pub log: RunLog,
}

/// Outcome of [`Trainer::run`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub stage1_best: Checkpoint,
    pub final_params: PolicyParams,
    pub log: RunLog,
}

/// Samples `G` rollouts per query under `behavior`; in stage 2 a
/// `q`-fraction of each group is augmented with a forced rethink before the
/// rewards are normalized. Parallel over queries, deterministic in `stream`.
#[allow(clippy::too_many_arguments)]
pub fn collect_groups(
    behavior: Policy<'_>,
    vocab: &Vocab,
    queries: &[Query],
    group_size: usize,
    stage: Stage,
    rethink: &RethinkConfig,
    catalog: &TriggerCatalog,
    max_len: usize,
    std_floor: f64,
    step: u64,
    stream: &RandomStream,
) -> Vec<Group> {
    queries
        .par_iter()
        .map(|q| {
            let mut s = stream.fork("query", q.id);
            let mut rollouts: Vec<_> = (0..group_size)
                .map(|_| {
                    let (tokens, logps) = behavior.sample_sequence(&q.context, max_len, &mut s);
                    let mut r = crate::types::Rollout::plain(q.id, tokens, logps);
                    r.reward = verify(vocab, q, &r.tokens);
                    r
                })
                .collect();
            if stage == Stage::Stage2Rethink {
                let mut rs = s.fork("rethink", 0);
                for i in select_for_rethink(group_size, rethink.q, &mut rs) {
                    let category = TriggerCategory::ALL[rs.below(TriggerCategory::ALL.len())];
                    if let Some(forced) =
                        force_rethink(behavior, vocab, q, &rollouts[i], catalog, category, rethink.y2_budget, &mut rs)
                    {
                        rollouts[i] = forced;
                    }
                }
            }
            let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
            Group {
                query: q.clone(),
                advantages: compute_advantages_with_floor(&rewards, std_floor),
                rollouts,
                step_created: step,
            }
        })
        .collect()
}

/// Training batch for `variant` before any replay.
pub fn batch_pairs(groups: &[Group], variant: Variant, target_pairs: usize) -> Vec<TrainPair> {
    match variant {
        Variant::Grpo => groups.iter().flat_map(TrainPair::from_group).collect(),
        Variant::GrpoFilter | Variant::GrpoSsr => groups
            .iter()
            .filter(|g| g.is_effective())
            .flat_map(TrainPair::from_group)
            .take(target_pairs)
            .collect(),
    }
}

/// Greedy pass@1 on `queries`.
pub fn greedy_accuracy(policy: Policy<'_>, vocab: &Vocab, queries: &[Query], max_len: usize) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let hits: Vec<f64> = queries
        .par_iter()
        .map(|q| verify(vocab, q, &policy.greedy_decode(&q.context, max_len)))
        .collect();
    hits.iter().sum::<f64>() / queries.len() as f64
}

pub struct Trainer {
    config: TrainConfig,
    dataset: Dataset,
    features: TaskFeatures,
    catalog: TriggerCatalog,
    state: TrainState,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        let features = TaskFeatures::new(dataset.vocab, dataset.context_len(), config.hash_buckets);
        let params = features.format_prior(&config.prior);
        let state = TrainState {
            behavior: params.snapshot(),
            optimizer: Optimizer::new(config.optimizer, config.lr, params.dim()),
            buffer: ReplayBuffer::new(config.replay_capacity(), config.replay_persist_steps(), config.ssr.alpha),
            params,
            stage: Stage::Stage1,
            epoch: 0,
            episode_in_epoch: 0,
            episodes_done: 0,
            step: 0,
            best: None,
            stage1_best: None,
            finished: false,
            log: RunLog::default(),
        };
        Ok(Trainer {
            catalog: TriggerCatalog::standard(&dataset.vocab),
            config,
            dataset,
            features,
            state,
        })
    }

    /// Continues from a state saved at an episode boundary.
    pub fn resume(config: TrainConfig, dataset: Dataset, state: TrainState) -> Result<Self> {
        let mut t = Trainer::new(config, dataset)?;
        if state.params.theta.len() != t.state.params.theta.len() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint has {} parameters, config implies {}",
                state.params.theta.len(),
                t.state.params.theta.len()
            )));
        }
        t.state = state;
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn features(&self) -> &TaskFeatures {
        &self.features
    }

    pub fn catalog(&self) -> &TriggerCatalog {
        &self.catalog
    }

    pub fn policy<'a>(&'a self, params: &'a PolicyParams) -> Policy<'a> {
        Policy::new(params, &self.features).with_terminator(self.dataset.vocab.terminator())
    }

    fn stage_index(stage: Stage) -> u64 {
        match stage {
            Stage::Stage1 => 0,
            Stage::Stage2Rethink => 1,
        }
    }

    fn episodes_per_epoch(&self) -> usize {
        self.dataset.train.len().div_ceil(self.config.episode_queries)
    }

    /// Training queries of episode `episode` in epoch `epoch` of `stage`.
    pub fn episode_queries(&self, stage: Stage, epoch: usize, episode: usize) -> Vec<Query> {
        let mut order: Vec<usize> = (0..self.dataset.train.len()).collect();
        derive_stream(self.config.seed, "shuffle", Self::stage_index(stage) * 1_000_000 + epoch as u64)
            .shuffle(&mut order);
        order
            .chunks(self.config.episode_queries)
            .nth(episode)
            .map(|c| c.iter().map(|i| self.dataset.train[*i].clone()).collect())
            .unwrap_or_default()
    }

    /// One update on `queries`, rolled out under the behavior snapshot.
    pub fn train_step(&mut self, queries: &[Query]) -> Result<StepMetrics> {
        let cfg = &self.config;
        let vocab = self.dataset.vocab;
        let step = self.state.step + 1;
        let stage = self.state.stage;
        let groups = {
            let behavior = self.policy(&self.state.behavior);
            collect_groups(
                behavior,
                &vocab,
                queries,
                cfg.group_size,
                stage,
                &cfg.rethink,
                &self.catalog,
                cfg.max_len,
                cfg.clip.std_floor,
                step,
                &derive_stream(cfg.seed, "rollout", step),
            )
        };

        let (pairs, replayed) = match cfg.variant {
            Variant::GrpoSsr => {
                self.state.buffer.expire(step);
                let composed = compose_batch(
                    &groups,
                    &self.state.buffer,
                    cfg.target_pairs,
                    &mut derive_stream(cfg.seed, "replay", step),
                );
                for g in groups.iter().filter(|g| g.is_effective()) {
                    self.state.buffer.insert(g, step);
                }
                (composed.pairs, composed.replayed)
            }
            v => (batch_pairs(&groups, v, cfg.target_pairs), 0),
        };

        let (loss, aux) = {
            let current = Policy::new(&self.state.params, &self.features).with_terminator(vocab.terminator());
            let loss = surrogate_objective(&pairs, current, &cfg.clip)?;
            let aux = if stage == Stage::Stage2Rethink {
                let items: Vec<(&Query, &crate::types::Rollout)> =
                    groups.iter().flat_map(|g| g.rollouts.iter().map(move |r| (&g.query, r))).collect();
                aux_nll_loss(&items, current, cfg.rethink.aux_weight, cfg.rethink.aux_covers_trigger)
            } else {
                LossReport::zero(self.state.params.dim())
            };
            (loss, aux)
        };

        let has_aux = aux.objective_value != 0.0;
        let skipped = pairs.is_empty() && !has_aux;
        if !skipped {
            let gradient: Vec<f64> = loss.gradient.iter().zip(&aux.gradient).map(|(g, a)| g - a).collect();
            self.state.optimizer.ascend(&mut self.state.params, &gradient);
        }

        let rethinking_ratio = (stage == Stage::Stage2Rethink).then(|| {
            let total: usize = groups.iter().map(|g| g.rollouts.len()).sum();
            let spont = groups
                .iter()
                .flat_map(|g| &g.rollouts)
                .filter(|r| detect_spontaneous(&vocab, r))
                .count();
            spont as f64 / total.max(1) as f64
        });
        let metrics = record_step(StepRecord {
            step,
            stage,
            groups: &groups,
            batch: &pairs,
            replayed,
            loss: &loss,
            aux_loss: aux.objective_value,
            rethinking_ratio,
            buffer_size: self.state.buffer.len(),
            skipped,
        });
        self.state.step = step;
        self.state.log.push_step(metrics.clone())?;
        Ok(metrics)
    }

    /// Runs the next episode; returns `false` once training is complete.
    pub fn run_episode(&mut self) -> Result<bool> {
        if self.state.finished {
            return Ok(false);
        }
        if self.state.episode_in_epoch >= self.episodes_per_epoch() {
            self.state.episode_in_epoch = 0;
            self.state.epoch += 1;
        }
        if self.state.epoch >= self.config.epochs_max && !self.advance_stage() {
            self.state.finished = true;
            return Ok(false);
        }

        let queries = self.episode_queries(self.state.stage, self.state.epoch, self.state.episode_in_epoch);
        self.state.behavior = self.state.params.snapshot();
        for chunk in queries.chunks(self.config.queries_per_step) {
            self.train_step(chunk)?;
        }
        self.state.buffer.clear();
        self.state.episode_in_epoch += 1;
        self.state.episodes_done += 1;

        let reward = greedy_accuracy(
            self.policy(&self.state.params),
            &self.dataset.vocab,
            &self.dataset.validation,
            self.config.max_len,
        );
        self.state.log.push_eval(EvalPoint {
            step: self.state.step,
            stage: self.state.stage,
            episode: self.state.episodes_done,
            validation_reward: reward,
        });
        if self.state.best.as_ref().is_none_or(|b| reward > b.validation_reward) {
            self.state.best = Some(Checkpoint {
                params: self.state.params.clone(),
                stage: self.state.stage,
                step: self.state.step,
                episode: self.state.episodes_done,
                validation_reward: reward,
                metrics: self.state.log.steps.last().cloned(),
            });
        }
        Ok(true)
    }

    /// Moves from stage 1 to stage 2 when configured. Returns whether
    /// another stage begins.
    fn advance_stage(&mut self) -> bool {
        if self.state.stage == Stage::Stage2Rethink || self.config.stage == Stage::Stage1 {
            return false;
        }
        let parent = self.state.best.clone().expect("stage 1 ran at least one episode");
        self.state.params = parent.params.clone();
        self.state.params.version = 0;
        self.state.optimizer = Optimizer::new(self.config.optimizer, self.config.lr, self.state.params.dim());
        self.state.buffer.clear();
        self.state.stage = Stage::Stage2Rethink;
        self.state.epoch = 0;
        self.state.episode_in_epoch = 0;
        self.state.episodes_done = 0;
        self.state.stage1_best = Some(parent);
        self.state.best = None;
        true
    }

    /// Runs to completion, calling `on_episode` after every episode.
    pub fn run(mut self, mut on_episode: impl FnMut(&TrainState) -> Result<()>) -> Result<TrainOutcome> {
        while self.run_episode()? {
            on_episode(&self.state)?;
        }
        let best = self.state.best.clone().ok_or(Error::EmptyLog)?;
        let stage1_best = self.state.stage1_best.clone().unwrap_or_else(|| best.clone());
        Ok(TrainOutcome {
            best,
            stage1_best,
            final_params: self.state.params,
            log: self.state.log,
        })
    }
}

/// Runs stage 1 (and stage 2 when configured) and returns the best
/// checkpoint with the full metrics log.
pub fn run_training(config: TrainConfig, dataset: Dataset) -> Result<TrainOutcome> {
    Trainer::new(config, dataset)?.run(|_| Ok(()))
}
