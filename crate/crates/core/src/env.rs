//! Seeded synthetic verifiable tasks, the binary verifier, difficulty-based
//! query filtering, and the task feature map shipped to the policy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{FeatureMap, Features, Policy, PolicyParams};
use crate::rng::{derive_stream, RandomStream};
use crate::types::{Query, Split, Token, TriggerCategory, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `(a op b) mod m`; difficulty sets the modulus.
    ModularArithmetic,
    /// Seeded key → answer facts; difficulty sets key-pool size and answer length.
    KeyedRecall,
    /// Arithmetic below difficulty 0.5, recall at or above it.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub num_queries: usize,
    /// `(difficulty, fraction)` pairs; fractions sum to 1.
    pub difficulty_mix: Vec<(f64, f64)>,
    pub seed: u64,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
}

fn default_validation_fraction() -> f64 {
    0.125
}

fn default_eval_fraction() -> f64 {
    0.125
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::Mixed,
            vocab_size: 18,
            num_queries: 1024,
            difficulty_mix: vec![(0.1, 0.4), (0.6, 0.3), (0.9, 0.3)],
            seed: 0,
            validation_fraction: default_validation_fraction(),
            eval_fraction: default_eval_fraction(),
        }
    }
}

impl TaskSpec {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab()?;
        if self.num_queries == 0 {
            return Err(Error::InvalidTaskSpec("num_queries must be >= 1".into()));
        }
        if self.difficulty_mix.is_empty() {
            return Err(Error::InvalidTaskSpec("difficulty_mix is empty".into()));
        }
        for (d, f) in &self.difficulty_mix {
            if !(0.0..=1.0).contains(d) || !(*f >= 0.0) {
                return Err(Error::InvalidTaskSpec(format!(
                    "mix entry ({d}, {f}): difficulty must lie in [0, 1] and fraction be >= 0"
                )));
            }
        }
        let total: f64 = self.difficulty_mix.iter().map(|(_, f)| f).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidTaskSpec(format!("mix fractions sum to {total}, not 1")));
        }
        let held_out = self.validation_fraction + self.eval_fraction;
        if !(self.validation_fraction >= 0.0 && self.eval_fraction >= 0.0 && held_out < 1.0) {
            return Err(Error::InvalidTaskSpec(format!(
                "validation ({}) and eval ({}) fractions must be >= 0 and sum below 1",
                self.validation_fraction, self.eval_fraction
            )));
        }
        Ok(())
    }
}

/// Modulus used by arithmetic queries at `difficulty`.
pub fn modulus_for(difficulty: f64, vocab: &Vocab) -> usize {
    let span = (vocab.num_digits() - 2) as f64;
    2 + (difficulty * span).round() as usize
}

/// Number of distinct keys in the recall pool at `difficulty`.
pub fn key_pool_for(difficulty: f64, vocab: &Vocab) -> usize {
    let max = vocab.num_digits() * vocab.num_digits();
    ((2.0 * 32f64.powf(difficulty)).round() as usize).clamp(2, max)
}

/// Answer length of recall queries at `difficulty`.
pub fn recall_answer_len(difficulty: f64) -> usize {
    if difficulty > 0.9 {
        2
    } else {
        1
    }
}

/// Largest-remainder apportionment of `total` by `fractions`.
fn apportion(total: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn difficulty_level(difficulty: f64, vocab: &Vocab) -> Token {
    vocab.digit((difficulty * (vocab.num_digits() - 1) as f64).round() as usize)
}

fn arithmetic_query(vocab: &Vocab, difficulty: f64, stream: &mut RandomStream) -> (Vec<Token>, Vec<Token>) {
    let m = modulus_for(difficulty, vocab);
    let a = stream.below(m);
    let b = stream.below(m);
    let (op, value) = if stream.bernoulli(0.5) {
        (vocab.op_add(), (a + b) % m)
    } else {
        (vocab.op_mul(), (a * b) % m)
    };
    (
        vec![op, vocab.digit(a), vocab.digit(b), vocab.digit(m - 1)],
        vec![vocab.digit(value)],
    )
}

/// Seeded key pool for one recall difficulty: keys are distinct digit pairs.
fn recall_pool(seed: u64, level: Token, difficulty: f64, vocab: &Vocab) -> Vec<(usize, usize)> {
    let n = vocab.num_digits();
    let mut all: Vec<(usize, usize)> = (0..n * n).map(|i| (i / n, i % n)).collect();
    derive_stream(seed, "recall_pool", level.id() as u64).shuffle(&mut all);
    all.truncate(key_pool_for(difficulty, vocab));
    all
}

fn recall_answer(seed: u64, level: Token, key: (usize, usize), difficulty: f64, vocab: &Vocab) -> Vec<Token> {
    let n = vocab.num_digits();
    let index = (level.id() * n + key.0) * n + key.1;
    let mut s = derive_stream(seed, "recall_answer", index as u64);
    (0..recall_answer_len(difficulty))
        .map(|_| vocab.digit(s.below(n)))
        .collect()
}

/// Generates the dataset described by `spec`, deterministic in its seed.
pub fn generate_dataset(spec: &TaskSpec) -> Result<Vec<Query>> {
    spec.validate()?;
    let vocab = spec.vocab()?;
    let fractions: Vec<f64> = spec.difficulty_mix.iter().map(|(_, f)| *f).collect();
    let counts = apportion(spec.num_queries, &fractions);

    let mut out = Vec::with_capacity(spec.num_queries);
    for (k, ((difficulty, _), count)) in spec.difficulty_mix.iter().zip(counts).enumerate() {
        let difficulty = *difficulty;
        let mut stream = derive_stream(spec.seed, "dataset", k as u64);
        let kind = match spec.kind {
            TaskKind::Mixed if difficulty < 0.5 => TaskKind::ModularArithmetic,
            TaskKind::Mixed => TaskKind::KeyedRecall,
            other => other,
        };
        let level = difficulty_level(difficulty, &vocab);
        let pool = recall_pool(spec.seed, level, difficulty, &vocab);

        let mut splits = vec![Split::Train; count];
        let n_val = (count as f64 * spec.validation_fraction).round() as usize;
        let n_eval = ((count as f64 * spec.eval_fraction).round() as usize).min(count - n_val);
        splits[..n_val].fill(Split::Validation);
        splits[n_val..n_val + n_eval].fill(Split::Eval);
        stream.fork("split", 0).shuffle(&mut splits);

        for split in splits {
            let (context, truth) = match kind {
                TaskKind::ModularArithmetic => arithmetic_query(&vocab, difficulty, &mut stream),
                _ => {
                    let key = pool[stream.below(pool.len())];
                    (
                        vec![vocab.recall_marker(), vocab.digit(key.0), vocab.digit(key.1), level],
                        recall_answer(spec.seed, level, key, difficulty, &vocab),
                    )
                }
            };
            out.push(Query {
                id: out.len() as u64,
                context,
                truth,
                difficulty,
                split,
            });
        }
    }
    Ok(out)
}

/// The answer span of a response: tokens after the last trigger (skipping
/// trigger filler), or the whole response, truncated at the terminator.
pub fn extract_answer<'t>(vocab: &Vocab, tokens: &'t [Token]) -> &'t [Token] {
    let mut start = tokens
        .iter()
        .rposition(|t| vocab.is_trigger_start(*t))
        .map_or(0, |i| i + 1);
    if start > 0 {
        while start < tokens.len() && tokens[start] == vocab.filler() {
            start += 1;
        }
    }
    let span = &tokens[start..];
    let end = span
        .iter()
        .position(|t| *t == vocab.terminator())
        .unwrap_or(span.len());
    &span[..end]
}

/// Binary reward: 1 iff the extracted final answer equals the truth.
pub fn verify(vocab: &Vocab, query: &Query, tokens: &[Token]) -> f64 {
    if extract_answer(vocab, tokens) == query.truth.as_slice() {
        1.0
    } else {
        0.0
    }
}

/// Monte-Carlo pass rate of each query under `policy` (`n_samples` rollouts).
pub fn pass_rates(
    vocab: &Vocab,
    queries: &[Query],
    policy: Policy<'_>,
    n_samples: usize,
    max_len: usize,
    stream: &RandomStream,
) -> Vec<f64> {
    queries
        .par_iter()
        .map(|q| {
            let mut s = stream.fork("pass_rate", q.id);
            let hits: f64 = (0..n_samples)
                .map(|_| {
                    let (tokens, _) = policy.sample_sequence(&q.context, max_len, &mut s);
                    verify(vocab, q, &tokens)
                })
                .sum();
            hits / n_samples as f64
        })
        .collect()
}

/// Keeps queries whose estimated pass rate lies in `[lo, hi]`.
pub fn filter_by_pass_rate(
    vocab: &Vocab,
    queries: &[Query],
    policy: Policy<'_>,
    n_samples: usize,
    keep_range: (f64, f64),
    max_len: usize,
    stream: &RandomStream,
) -> Result<Vec<Query>> {
    let (lo, hi) = keep_range;
    if n_samples == 0 || !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "filter needs n_samples >= 1 and 0 <= lo <= hi <= 1 (got {n_samples}, {lo}, {hi})"
        )));
    }
    let rates = pass_rates(vocab, queries, policy, n_samples, max_len, stream);
    Ok(queries
        .iter()
        .zip(rates)
        .filter(|(_, r)| (lo..=hi).contains(r))
        .map(|(q, _)| q.clone())
        .collect())
}

pub const DEFAULT_FILTER_SAMPLES: usize = 8;
pub const DEFAULT_KEEP_RANGE: (f64, f64) = (0.0, 0.875);

/// Logit offsets of the initial ("format-aware") policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormatPrior {
    /// Preference for a digit at the start of an answer segment.
    pub digit_start: f64,
    /// Preference for the terminator right after a digit.
    pub terminate: f64,
    /// Penalty on trigger-start tokens everywhere.
    pub trigger: f64,
    /// Penalty on filler and context-marker tokens.
    pub junk: f64,
}

impl Default for FormatPrior {
    fn default() -> Self {
        FormatPrior {
            digit_start: 4.0,
            terminate: 5.0,
            trigger: 6.0,
            junk: 6.0,
        }
    }
}

/// Hand-coded features for the synthetic tasks.
///
/// Blocks, in order: bias; previous generated token (one-hot, plus a
/// start-of-response slot); position parity; a rethink flag set once any
/// trigger-start token has been generated; context token one-hots per
/// context position (separate copies before and after a trigger); and a hashed conjunction of the whole context, the
/// position inside the current answer segment and the rethink flag.
///
/// Trigger-start tokens are masked at the first position and after a
/// trigger, so a response rethinks at most once.
#[derive(Debug, Clone)]
pub struct TaskFeatures {
    vocab: Vocab,
    context_len: usize,
    hash_buckets: usize,
}

const MAX_SEGMENT_POS: usize = 3;

impl TaskFeatures {
    pub fn new(vocab: Vocab, context_len: usize, hash_buckets: usize) -> Self {
        TaskFeatures {
            vocab,
            context_len,
            hash_buckets,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn prev_offset(&self) -> usize {
        1
    }

    fn parity_offset(&self) -> usize {
        self.prev_offset() + self.vocab.size() + 1
    }

    fn flag_index(&self) -> usize {
        self.parity_offset() + 2
    }

    fn context_offset(&self) -> usize {
        self.flag_index() + 1
    }

    /// Context one-hots come in two copies: before and after a trigger.
    fn hash_offset(&self) -> usize {
        self.context_offset() + 2 * self.context_len * self.vocab.size()
    }

    /// Index of the previous-token feature for `prev` (`None` = response start).
    pub fn prev_feature(&self, prev: Option<Token>) -> usize {
        self.prev_offset() + prev.map_or(self.vocab.size(), Token::id)
    }

    fn segment_pos(&self, prefix: &[Token]) -> usize {
        let since = prefix
            .iter()
            .rev()
            .take_while(|t| !self.vocab.is_trigger_start(**t) && **t != self.vocab.filler())
            .count();
        since.min(MAX_SEGMENT_POS)
    }

    fn context_bucket(&self, context: &[Token], segment_pos: usize, rethinking: bool) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ (segment_pos as u64) ^ ((rethinking as u64) << 8);
        for t in context {
            h = (h ^ t.0 as u64).wrapping_mul(0x0000_0100_0000_01b3);
            h ^= h >> 29;
        }
        h = h.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        ((h >> 17) % self.hash_buckets as u64) as usize
    }

    /// The initial policy: knows the response format, not the answers.
    pub fn format_prior(&self, prior: &FormatPrior) -> PolicyParams {
        let v = self.vocab;
        let mut p = PolicyParams::zeros(v.size(), self.dim());
        for c in TriggerCategory::ALL {
            *p.weight_mut(v.trigger_start(c), 0) = -prior.trigger;
            *p.weight_mut(v.trigger_start(c), self.flag_index()) = -prior.trigger;
        }
        for t in [v.filler(), v.op_add(), v.op_mul(), v.recall_marker()] {
            *p.weight_mut(t, 0) = -prior.junk;
        }
        let mut starts = vec![None, Some(v.filler())];
        starts.extend(TriggerCategory::ALL.iter().map(|c| Some(v.trigger_start(*c))));
        for s in starts {
            let f = self.prev_feature(s);
            for d in 0..v.num_digits() {
                *p.weight_mut(v.digit(d), f) = prior.digit_start;
            }
        }
        for d in 0..v.num_digits() {
            *p.weight_mut(v.terminator(), self.prev_feature(Some(v.digit(d)))) = prior.terminate;
        }
        p
    }
}

impl FeatureMap for TaskFeatures {
    fn dim(&self) -> usize {
        self.hash_offset() + self.hash_buckets
    }

    fn features(&self, context: &[Token], prefix: &[Token], pos: usize) -> Features {
        let mut f = Vec::with_capacity(5 + self.context_len);
        f.push((0, 1.0));
        f.push((self.prev_feature(prefix.last().copied()), 1.0));
        f.push((self.parity_offset() + pos % 2, 1.0));
        let rethinking = prefix.iter().any(|t| self.vocab.is_trigger_start(*t));
        if rethinking {
            f.push((self.flag_index(), 1.0));
        }
        let block = self.context_offset() + if rethinking { self.context_len * self.vocab.size() } else { 0 };
        for (i, t) in context.iter().take(self.context_len).enumerate() {
            f.push((block + i * self.vocab.size() + t.id(), 1.0));
        }
        let seg = self.segment_pos(prefix);
        f.push((self.hash_offset() + self.context_bucket(context, seg, rethinking), 1.0));
        f
    }

    /// A trigger may start only after a non-empty initial segment, once.
    fn allows(&self, prefix: &[Token], token: Token) -> bool {
        !self.vocab.is_trigger_start(token)
            || (!prefix.is_empty() && !prefix.iter().any(|t| self.vocab.is_trigger_start(*t)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(18).unwrap()
    }

    fn spec(mix: Vec<(f64, f64)>, n: usize) -> TaskSpec {
        TaskSpec {
            kind: TaskKind::Mixed,
            num_queries: n,
            difficulty_mix: mix,
            seed: 11,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let s = TaskSpec::default();
        assert_eq!(generate_dataset(&s).unwrap(), generate_dataset(&s).unwrap());
    }

    #[test]
    fn easiest_arithmetic_uses_binary_operands() {
        let mut s = spec(vec![(0.0, 1.0)], 200);
        s.kind = TaskKind::ModularArithmetic;
        let v = vocab();
        for q in generate_dataset(&s).unwrap() {
            assert_eq!(q.truth.len(), 1);
            assert!(q.truth[0].id() < 2);
            assert!(q.context[1].id() < 2 && q.context[2].id() < 2);
            assert_eq!(q.context[3], v.digit(1));
        }
    }

    #[test]
    fn mix_counts_are_exact() {
        let qs = generate_dataset(&spec(vec![(0.1, 0.5), (0.9, 0.5)], 100)).unwrap();
        assert_eq!(qs.iter().filter(|q| q.difficulty == 0.1).count(), 50);
        assert_eq!(qs.iter().filter(|q| q.difficulty == 0.9).count(), 50);
        assert_eq!(apportion(10, &[1.0 / 3.0; 3]).iter().sum::<usize>(), 10);
    }

    #[test]
    fn rejects_bad_fractions() {
        assert!(generate_dataset(&spec(vec![(0.1, 0.5), (0.9, 0.4)], 10)).is_err());
        assert!(generate_dataset(&spec(vec![(1.5, 1.0)], 10)).is_err());
        assert!(generate_dataset(&spec(vec![(0.5, 1.0)], 0)).is_err());
    }

    #[test]
    fn every_query_verifies_against_its_truth() {
        let v = vocab();
        let s = TaskSpec {
            num_queries: 500,
            difficulty_mix: vec![(0.0, 0.2), (0.3, 0.2), (0.6, 0.2), (0.95, 0.2), (1.0, 0.2)],
            ..TaskSpec::default()
        };
        for q in generate_dataset(&s).unwrap() {
            q.validate().unwrap();
            let mut y = q.truth.clone();
            y.push(v.terminator());
            assert_eq!(verify(&v, &q, &y), 1.0);
        }
    }

    #[test]
    fn recall_facts_are_consistent_across_splits() {
        let s = spec(vec![(0.6, 1.0)], 400);
        let qs = generate_dataset(&s).unwrap();
        let mut facts = std::collections::HashMap::new();
        for q in &qs {
            let prev = facts.insert(q.context.clone(), q.truth.clone());
            assert!(prev.map_or(true, |t| t == q.truth));
        }
        assert!(facts.len() <= key_pool_for(0.6, &vocab()));
        for split in [Split::Train, Split::Validation, Split::Eval] {
            assert!(qs.iter().any(|q| q.split == split));
        }
    }

    #[test]
    fn verify_examples() {
        let v = vocab();
        let q = Query {
            id: 0,
            context: vec![v.op_add(), v.digit(1), v.digit(2), v.digit(4)],
            truth: vec![v.digit(3)],
            difficulty: 0.5,
            split: Split::Train,
        };
        let t = v.terminator();
        assert_eq!(verify(&v, &q, &[v.digit(3), t]), 1.0);
        assert_eq!(verify(&v, &q, &[v.digit(4), t]), 0.0);
        assert_eq!(verify(&v, &q, &[v.digit(3), v.digit(3), t]), 0.0);
        let trig = v.trigger_start(TriggerCategory::SelfCorrection);
        assert_eq!(verify(&v, &q, &[v.digit(4), trig, v.digit(3), t]), 1.0);
        assert_eq!(verify(&v, &q, &[v.digit(3), trig, v.filler(), v.digit(5), t]), 0.0);
        assert_eq!(verify(&v, &q, &[v.digit(4), trig, v.filler(), v.digit(3), t]), 1.0);
    }

    #[test]
    fn task_features_have_fixed_dim_and_valid_indices() {
        let v = vocab();
        let fm = TaskFeatures::new(v, 4, 64);
        let ctx = [v.recall_marker(), v.digit(1), v.digit(2), v.digit(3)];
        let prefixes: [&[Token]; 3] = [&[], &[v.digit(1)], &[v.digit(1), v.trigger_start(TriggerCategory::SelfVerification)]];
        for p in prefixes {
            let dense = fm.dense(&ctx, p, p.len());
            assert_eq!(dense.len(), fm.dim());
            assert_eq!(fm.features(&ctx, p, p.len()), fm.features(&ctx, p, p.len()));
        }
    }

    #[test]
    fn format_prior_prefers_digit_then_terminator() {
        let v = vocab();
        let fm = TaskFeatures::new(v, 4, 64);
        let params = fm.format_prior(&FormatPrior::default());
        let pol = Policy::new(&params, &fm).with_terminator(v.terminator());
        let ctx = [v.recall_marker(), v.digit(1), v.digit(2), v.digit(3)];
        let out = pol.greedy_decode(&ctx, 8);
        assert_eq!(out, vec![v.digit(0), v.terminator()]);
    }
}
