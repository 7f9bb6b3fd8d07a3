//! Selective sample replay: a buffer of non-zero-advantage samples that
//! refills shrinking training batches, sampling proportional to `|Â|^α`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::TrainPair;
use crate::rng::RandomStream;
use crate::types::{Group, Query, Rollout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub query: Query,
    pub rollout: Rollout,
    pub advantage: f64,
    pub inserted_step: u64,
}

impl ReplayEntry {
    pub fn to_pair(&self) -> TrainPair {
        TrainPair {
            query: self.query.clone(),
            rollout: self.rollout.clone(),
            advantage: self.advantage,
            replayed: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    /// Maximum number of entries; `None` means `4 × target_pairs`.
    pub capacity: Option<usize>,
    /// Entry lifetime in steps; `None` means the episode length.
    pub persist_steps: Option<u64>,
    pub alpha: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            capacity: None,
            persist_steps: None,
            alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    entries: VecDeque<ReplayEntry>,
    capacity: usize,
    persist_steps: u64,
    alpha: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, persist_steps: u64, alpha: f64) -> Self {
        assert!(alpha >= 0.0, "alpha must be non-negative");
        ReplayBuffer {
            entries: VecDeque::new(),
            capacity,
            persist_steps,
            alpha,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn entries(&self) -> impl Iterator<Item = &ReplayEntry> {
        self.entries.iter()
    }

    /// Stores every rollout of `group` with a non-zero advantage, evicting
    /// the oldest entries beyond capacity. Returns how many were stored.
    pub fn insert(&mut self, group: &Group, step: u64) -> usize {
        let mut inserted = 0;
        for (rollout, adv) in group.rollouts.iter().zip(&group.advantages) {
            if adv.abs() > 0.0 {
                self.entries.push_back(ReplayEntry {
                    query: group.query.clone(),
                    rollout: rollout.clone(),
                    advantage: *adv,
                    inserted_step: step,
                });
                inserted += 1;
            }
        }
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        inserted
    }

    /// Drops entries with `current_step - inserted_step >= K`.
    pub fn expire(&mut self, current_step: u64) {
        let k = self.persist_steps;
        self.entries
            .retain(|e| current_step.saturating_sub(e.inserted_step) < k);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Selection probabilities `|Â_j|^α / Σ_k |Â_k|^α`, in entry order.
    pub fn probabilities(&self) -> Vec<f64> {
        let weights: Vec<f64> = self.entries.iter().map(|e| e.advantage.abs().powf(self.alpha)).collect();
        let total: f64 = weights.iter().sum();
        weights.iter().map(|w| w / total).collect()
    }

    /// `n` prioritized draws with replacement.
    pub fn sample(&self, n: usize, stream: &mut RandomStream) -> Result<Vec<ReplayEntry>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyReplayBuffer);
        }
        let probs = self.probabilities();
        Ok((0..n)
            .map(|_| self.entries[stream.categorical(&probs)].clone())
            .collect())
    }

    pub fn snapshot(&self) -> Vec<ReplayEntry> {
        self.entries.iter().cloned().collect()
    }
}

/// A training batch and how it was assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedBatch {
    pub pairs: Vec<TrainPair>,
    pub replayed: usize,
    /// Pairs missing from the target because the buffer was empty.
    pub shortfall: usize,
}

/// On-policy rollouts of effective groups first (in group order, truncated
/// to the target), then prioritized replay to fill the remainder.
pub fn compose_batch(
    on_policy: &[Group],
    buffer: &ReplayBuffer,
    target_pairs: usize,
    stream: &mut RandomStream,
) -> ComposedBatch {
    let mut pairs: Vec<TrainPair> = on_policy
        .iter()
        .filter(|g| g.is_effective())
        .flat_map(TrainPair::from_group)
        .take(target_pairs)
        .collect();
    let missing = target_pairs - pairs.len();
    let mut replayed = 0;
    if missing > 0 {
        if let Ok(entries) = buffer.sample(missing, stream) {
            replayed = entries.len();
            pairs.extend(entries.iter().map(ReplayEntry::to_pair));
        }
    }
    let shortfall = target_pairs - pairs.len();
    ComposedBatch {
        pairs,
        replayed,
        shortfall,
    }
}
