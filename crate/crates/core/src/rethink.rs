//! Forced rethinking: trigger insertion on a sampled fraction of rollouts,
//! rethink-segment generation, the auxiliary likelihood loss on successful
//! rethink segments, spontaneous-rethink detection, and the evaluation modes.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::verify;
use crate::error::{Error, Result};
use crate::grpo::LossReport;
use crate::policy::Policy;
use crate::rng::RandomStream;
use crate::types::{Query, Rollout, Token, TriggerCategory, Vocab};

/// Category → trigger token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TriggerCatalog {
    pub entries: BTreeMap<TriggerCategory, Vec<Token>>,
}

impl TriggerCatalog {
    /// One short sequence per category: the category's start token,
    /// optionally followed by filler.
    pub fn standard(vocab: &Vocab) -> Self {
        let f = vocab.filler();
        let mut entries = BTreeMap::new();
        entries.insert(
            TriggerCategory::SelfVerification,
            vec![vocab.trigger_start(TriggerCategory::SelfVerification), f],
        );
        entries.insert(
            TriggerCategory::SelfCorrection,
            vec![vocab.trigger_start(TriggerCategory::SelfCorrection)],
        );
        entries.insert(
            TriggerCategory::SelfQuestioning,
            vec![vocab.trigger_start(TriggerCategory::SelfQuestioning), f, f],
        );
        TriggerCatalog { entries }
    }

    pub fn get(&self, category: TriggerCategory) -> &[Token] {
        &self.entries[&category]
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        for c in TriggerCategory::ALL {
            let seq = self
                .entries
                .get(&c)
                .ok_or_else(|| Error::InvalidConfig(format!("trigger catalog is missing {c:?}")))?;
            if seq.first() != Some(&vocab.trigger_start(c)) {
                return Err(Error::InvalidConfig(format!(
                    "trigger for {c:?} must begin with its start token {}",
                    vocab.trigger_start(c).0
                )));
            }
            if seq[1..].iter().any(|t| *t != vocab.filler()) {
                return Err(Error::InvalidConfig(format!(
                    "trigger for {c:?} may only continue with filler tokens"
                )));
            }
        }
        let mut seqs: Vec<&Vec<Token>> = self.entries.values().collect();
        seqs.sort();
        seqs.dedup();
        if seqs.len() != self.entries.len() {
            return Err(Error::InvalidConfig("trigger sequences must be distinct".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RethinkMode {
    Off,
    Train,
    EvalForced,
    EvalBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RethinkConfig {
    /// Fraction of rollouts augmented during rethink training.
    pub q: f64,
    pub aux_weight: f64,
    pub y2_budget: usize,
    pub mode: RethinkMode,
    /// Whether the auxiliary likelihood also covers the trigger tokens.
    pub aux_covers_trigger: bool,
}

impl Default for RethinkConfig {
    fn default() -> Self {
        RethinkConfig {
            q: 0.25,
            aux_weight: 1.0,
            y2_budget: 8,
            mode: RethinkMode::Off,
            aux_covers_trigger: true,
        }
    }
}

impl RethinkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == RethinkMode::Train && !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::InvalidConfig(format!("rethink q {} must lie in (0, 1)", self.q)));
        }
        if !(self.aux_weight >= 0.0) || self.y2_budget == 0 {
            return Err(Error::InvalidConfig("aux_weight must be >= 0 and y2_budget >= 1".into()));
        }
        Ok(())
    }
}

/// Independently selects each of `n` rollouts with probability `q`.
pub fn select_for_rethink(n: usize, q: f64, stream: &mut RandomStream) -> Vec<usize> {
    (0..n).filter(|_| stream.bernoulli(q)).collect()
}

/// Appends the `category` trigger after `y1` (the rollout minus its
/// terminator) and samples a rethink segment of at most `y2_budget` tokens.
///
/// Returns `None` for rollouts that already contain a trigger or whose
/// initial segment is empty.
#[allow(clippy::too_many_arguments)]
pub fn force_rethink(
    policy: Policy<'_>,
    vocab: &Vocab,
    query: &Query,
    rollout: &Rollout,
    catalog: &TriggerCatalog,
    category: TriggerCategory,
    y2_budget: usize,
    stream: &mut RandomStream,
) -> Option<Rollout> {
    if rollout.trigger_span.is_some() || rollout.tokens.iter().any(|t| vocab.is_trigger_start(*t)) {
        return None;
    }
    let y1_end = match rollout.tokens.last() {
        Some(t) if *t == vocab.terminator() => rollout.len() - 1,
        _ => rollout.len(),
    };
    if y1_end == 0 {
        return None;
    }
    let mut tokens = rollout.tokens[..y1_end].to_vec();
    let mut logps = rollout.behavior_logps[..y1_end].to_vec();
    for t in catalog.get(category) {
        logps.push(policy.token_logprob(&query.context, &tokens, *t));
        tokens.push(*t);
    }
    let trigger_end = tokens.len();
    let (y2, y2_logps) = policy.sample_continuation(&query.context, &tokens, y2_budget, stream);
    tokens.extend(y2);
    logps.extend(y2_logps);
    let reward = verify(vocab, query, &tokens);
    Some(Rollout {
        query_id: rollout.query_id,
        tokens,
        seg_y1_end: y1_end,
        trigger_span: Some((y1_end, trigger_end)),
        behavior_logps: logps,
        reward,
        trigger_category: Some(category),
        forced: true,
    })
}

/// Auxiliary negative log-likelihood on the rethink segments of forced
/// rollouts that reached a correct final answer, averaged over those
/// rollouts. `gradient` is the gradient of the loss (to be descended).
pub fn aux_nll_loss(
    items: &[(&Query, &Rollout)],
    current: Policy<'_>,
    aux_weight: f64,
    covers_trigger: bool,
) -> LossReport {
    let dim = current.params().dim();
    let fdim = current.feature_dim();
    let mut report = LossReport::zero(dim);
    let qualifying: Vec<&(&Query, &Rollout)> = items
        .iter()
        .filter(|(_, r)| r.forced && r.reward == 1.0 && r.trigger_span.is_some())
        .collect();
    if qualifying.is_empty() || aux_weight == 0.0 {
        return report;
    }
    let scale = aux_weight / qualifying.len() as f64;
    for (query, r) in qualifying {
        let (start, end) = r.trigger_span.expect("filtered above");
        let first = if covers_trigger { start } else { end };
        for t in first..r.len() {
            let step = current.step(&query.context, &r.tokens[..t]);
            report.objective_value -= scale * step.logp(r.tokens[t]);
            step.accumulate_grad(r.tokens[t], -scale, fdim, &mut report.gradient);
        }
    }
    report
}

/// True iff the response contains a trigger-start token that the harness
/// did not insert.
pub fn detect_spontaneous(vocab: &Vocab, rollout: &Rollout) -> bool {
    rollout
        .tokens
        .iter()
        .enumerate()
        .any(|(t, tok)| vocab.is_trigger_start(*tok) && rollout.is_policy_token(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Off,
    Forced,
    Bound,
}

/// Per-query evaluation outcome under all three modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub query_id: u64,
    pub difficulty: f64,
    pub off_tokens: Vec<Token>,
    pub forced_tokens: Vec<Token>,
    pub off_correct: bool,
    pub forced_correct: bool,
    pub bound_correct: bool,
    pub spontaneous: bool,
}

impl EvalOutcome {
    pub fn correct(&self, mode: EvalMode) -> bool {
        match mode {
            EvalMode::Off => self.off_correct,
            EvalMode::Forced => self.forced_correct,
            EvalMode::Bound => self.bound_correct,
        }
    }
}

/// Greedy evaluation of every query in all modes.
///
/// `off`: plain greedy decode. `forced`: greedy `y1`, then the
/// self-verification trigger, then a greedy rethink segment. `bound`: the
/// forced outcome is used only when the greedy answer was wrong.
pub fn evaluate(
    policy: Policy<'_>,
    vocab: &Vocab,
    queries: &[Query],
    catalog: &TriggerCatalog,
    max_len: usize,
    y2_budget: usize,
) -> Vec<EvalOutcome> {
    queries
        .par_iter()
        .map(|q| {
            let off_tokens = policy.greedy_decode(&q.context, max_len);
            let off_correct = verify(vocab, q, &off_tokens) == 1.0;
            let spontaneous = off_tokens.iter().any(|t| vocab.is_trigger_start(*t));

            let mut forced_tokens: Vec<Token> = off_tokens
                .iter()
                .copied()
                .take_while(|t| *t != vocab.terminator())
                .collect();
            forced_tokens.extend_from_slice(catalog.get(TriggerCategory::SelfVerification));
            let y2 = policy.greedy_continuation(&q.context, &forced_tokens, y2_budget);
            forced_tokens.extend(y2);
            let forced_correct = verify(vocab, q, &forced_tokens) == 1.0;

            EvalOutcome {
                query_id: q.id,
                difficulty: q.difficulty,
                off_tokens,
                forced_tokens,
                off_correct,
                forced_correct,
                bound_correct: off_correct || forced_correct,
                spontaneous,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: EvalMode,
    pub accuracy: f64,
    pub rethinking_ratio: f64,
    pub queries: usize,
}

pub fn summarize(outcomes: &[EvalOutcome], mode: EvalMode) -> ModeReport {
    let n = outcomes.len().max(1) as f64;
    ModeReport {
        mode,
        accuracy: outcomes.iter().filter(|o| o.correct(mode)).count() as f64 / n,
        rethinking_ratio: outcomes.iter().filter(|o| o.spontaneous).count() as f64 / n,
        queries: outcomes.len(),
    }
}

pub fn eval_with_mode(
    policy: Policy<'_>,
    vocab: &Vocab,
    queries: &[Query],
    mode: EvalMode,
    catalog: &TriggerCatalog,
    max_len: usize,
    y2_budget: usize,
) -> (Vec<EvalOutcome>, ModeReport) {
    let outcomes = evaluate(policy, vocab, queries, catalog, max_len, y2_budget);
    let report = summarize(&outcomes, mode);
    (outcomes, report)
}

/// Per-difficulty `(difficulty, queries, accuracy, rethinking ratio)`.
pub fn by_difficulty(outcomes: &[EvalOutcome], mode: EvalMode) -> Vec<(f64, usize, f64, f64)> {
    let mut buckets: BTreeMap<u64, Vec<&EvalOutcome>> = BTreeMap::new();
    for o in outcomes {
        buckets.entry(o.difficulty.to_bits()).or_default().push(o);
    }
    let mut rows: Vec<(f64, usize, f64, f64)> = buckets
        .into_values()
        .map(|os| {
            let n = os.len() as f64;
            (
                os[0].difficulty,
                os.len(),
                os.iter().filter(|o| o.correct(mode)).count() as f64 / n,
                os.iter().filter(|o| o.spontaneous).count() as f64 / n,
            )
        })
        .collect();
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    rows
}
