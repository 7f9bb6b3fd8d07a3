//! Sampling-based checks against closed-form expectations.

mod common;

use common::{query, random_params, RandomFeatures};
use rethink_core::env::{filter_by_pass_rate, generate_dataset, pass_rates, TaskFeatures, TaskKind, TaskSpec};
use rethink_core::grpo::compute_advantages;
use rethink_core::policy::{BiasFeatures, FeatureMap, Features, Policy, PolicyParams};
use rethink_core::rethink::select_for_rethink;
use rethink_core::rng::derive_stream;
use rethink_core::ssr::ReplayBuffer;
use rethink_core::types::{Group, Rollout, Token, Vocab};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn uniform_two_token_policy_samples_each_half_the_time() {
    let params = PolicyParams::zeros(2, 1);
    let pol = Policy::new(&params, &BiasFeatures);
    let mut s = derive_stream(1, "mc-sample", 0);
    let n = 100_000;
    let ones = (0..n)
        .filter(|_| pol.sample_sequence(&[], 1, &mut s).0[0] == Token(1))
        .count();
    let freq = ones as f64 / n as f64;
    assert!((freq - 0.5).abs() < 0.01, "frequency {freq}");
}

#[test]
fn score_function_has_zero_mean() {
    let fmap = RandomFeatures { dim: 4, salt: 7 };
    let mut s = derive_stream(2, "mc-score", 0);
    let params = random_params(3, 4, 1.0, &mut s);
    let pol = Policy::new(&params, &fmap).with_terminator(Token(0));
    let context = [Token(1), Token(2)];
    let n = 20_000;
    let dim = params.dim();
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    for _ in 0..n {
        let (tokens, _) = pol.sample_sequence(&context, 3, &mut s);
        for (i, g) in pol.grad_sequence_logprob(&context, &tokens).into_iter().enumerate() {
            sum[i] += g;
            sum_sq[i] += g * g;
        }
    }
    for i in 0..dim {
        let mean = sum[i] / n as f64;
        let se = ((sum_sq[i] / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * se + 1e-12, "component {i}: mean {mean}, se {se}");
    }
}

#[test]
fn rethink_selection_rate_matches_q() {
    let mut s = derive_stream(3, "mc-select", 0);
    let n = 100_000;
    let picked = select_for_rethink(n, 0.25, &mut s).len();
    let rate = picked as f64 / n as f64;
    assert!((rate - 0.25).abs() < 0.005, "rate {rate}");
}

/// Emits a digit in {0, 1} uniformly, then the terminator.
struct CoinThenStop;

impl FeatureMap for CoinThenStop {
    fn dim(&self) -> usize {
        2
    }

    fn features(&self, _: &[Token], _: &[Token], pos: usize) -> Features {
        vec![(pos.min(1), 1.0)]
    }
}

fn coin_params(vocab: &Vocab) -> PolicyParams {
    let mut p = PolicyParams::zeros(vocab.size(), 2);
    for v in 0..vocab.size() {
        let t = Token(v as u16);
        *p.weight_mut(t, 0) = if t == vocab.digit(0) || t == vocab.digit(1) { 0.0 } else { -60.0 };
        *p.weight_mut(t, 1) = if t == vocab.terminator() { 60.0 } else { 0.0 };
    }
    p
}

#[test]
fn filter_keep_fraction_matches_binomial() {
    let spec = TaskSpec {
        kind: TaskKind::ModularArithmetic,
        num_queries: 8000,
        difficulty_mix: vec![(0.0, 1.0)],
        seed: 4,
        ..TaskSpec::default()
    };
    let vocab = spec.vocab().unwrap();
    let queries = generate_dataset(&spec).unwrap();
    let fmap = CoinThenStop;
    let params = coin_params(&vocab);
    let pol = Policy::new(&params, &fmap).with_terminator(vocab.terminator());
    let stream = derive_stream(4, "mc-filter", 0);

    let rates = pass_rates(&vocab, &queries[..200], pol, 2000, 4, &stream);
    let mean_rate = rates.iter().sum::<f64>() / rates.len() as f64;
    assert!((mean_rate - 0.5).abs() < 0.01, "per-sample pass rate {mean_rate}");

    let kept = filter_by_pass_rate(&vocab, &queries, pol, 8, (0.0, 0.875), 4, &stream).unwrap();
    let frac = kept.len() as f64 / queries.len() as f64;
    let expected = 1.0 - 1.0 / 256.0;
    let se = (expected * (1.0 - expected) / queries.len() as f64).sqrt();
    assert!((frac - expected).abs() < 4.0 * se, "kept {frac}, expected {expected}");
}

#[test]
fn pass_rate_is_non_increasing_in_difficulty() {
    let levels = [0.0, 0.3, 0.6, 0.95];
    let spec = TaskSpec {
        num_queries: 2000,
        difficulty_mix: levels.iter().map(|d| (*d, 0.25)).collect(),
        seed: 5,
        ..TaskSpec::default()
    };
    let vocab = spec.vocab().unwrap();
    let queries = generate_dataset(&spec).unwrap();
    let fmap = TaskFeatures::new(vocab, 4, 64);
    let params = fmap.format_prior(&Default::default());
    let pol = Policy::new(&params, &fmap).with_terminator(vocab.terminator());
    // 500 queries per level × 20 samples = 10^4 samples per level.
    let rates = pass_rates(&vocab, &queries, pol, 20, 6, &derive_stream(5, "mc-mono", 0));
    let stats: Vec<(f64, f64)> = levels
        .iter()
        .map(|d| {
            let xs: Vec<f64> = queries.iter().zip(&rates).filter(|(q, _)| q.difficulty == *d).map(|(_, r)| *r).collect();
            let n = xs.len() as f64 * 20.0;
            let p = xs.iter().sum::<f64>() / xs.len() as f64;
            (p, (p * (1.0 - p) / n).sqrt())
        })
        .collect();
    for w in stats.windows(2) {
        let ((p0, se0), (p1, se1)) = (w[0], w[1]);
        assert!(p1 <= p0 + 2.0 * (se0 * se0 + se1 * se1).sqrt(), "pass rates {stats:?}");
    }
}

#[test]
fn replay_sampling_frequencies_pass_chi_square() {
    let mut buffer = ReplayBuffer::new(64, 100, 1.0);
    let patterns: [&[f64]; 3] = [&[1.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0], &[1.0, 1.0, 1.0, 0.0]];
    let mut next_token = 0u16;
    for (id, rewards) in patterns.iter().enumerate() {
        let rollouts: Vec<Rollout> = rewards
            .iter()
            .map(|r| {
                next_token += 1;
                let mut ro = Rollout::plain(id as u64, vec![Token(next_token)], vec![-0.1]);
                ro.reward = *r;
                ro
            })
            .collect();
        let group = Group {
            query: query(id as u64, vec![Token(0)], vec![Token(1)], 0.5),
            advantages: compute_advantages(rewards),
            rollouts,
            step_created: 0,
        };
        buffer.insert(&group, 0);
    }
    let k = buffer.len();
    assert_eq!(k, 12);
    let probs = buffer.probabilities();
    let index_of = |t: Token| buffer.entries().position(|e| e.rollout.tokens[0] == t).unwrap();

    let n = 100_000;
    let mut counts = vec![0usize; k];
    for e in buffer.sample(n, &mut derive_stream(6, "mc-replay", 0)).unwrap() {
        counts[index_of(e.rollout.tokens[0])] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(&probs)
        .map(|(c, p)| {
            let expected = p * n as f64;
            (*c as f64 - expected).powi(2) / expected
        })
        .sum();
    let p_value = 1.0 - ChiSquared::new((k - 1) as f64).unwrap().cdf(chi2);
    assert!(p_value > 1e-3, "chi2 {chi2}, p {p_value}");
}
