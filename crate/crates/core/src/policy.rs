//! Log-linear softmax sequence policies with exact log-probabilities and
//! exact analytic gradients.
//!
//! The logit of token `v` at a position is `dot(theta[v * F..(v + 1) * F], x)`
//! where `x` is the feature vector produced by an injected [`FeatureMap`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RandomStream;
use crate::types::Token;

/// Sparse feature vector as `(index, value)` pairs. Indices may repeat; the
/// values are summed.
pub type Features = Vec<(usize, f64)>;

/// A pure function from (context, generated prefix, position) to features.
pub trait FeatureMap: Send + Sync {
    /// Feature dimension `F`.
    fn dim(&self) -> usize;

    /// Features for the next token given `prefix`; `pos == prefix.len()`.
    fn features(&self, context: &[Token], prefix: &[Token], pos: usize) -> Features;

    /// Whether `token` may follow `prefix`. Disallowed tokens get
    /// probability zero.
    fn allows(&self, _prefix: &[Token], _token: Token) -> bool {
        true
    }

    /// Dense form of [`FeatureMap::features`], always of length `F`.
    fn dense(&self, context: &[Token], prefix: &[Token], pos: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (i, x) in self.features(context, prefix, pos) {
            out[i] += x;
        }
        out
    }
}

/// A single always-on feature: the policy reduces to one logit per token.
#[derive(Debug, Clone, Copy, Default)]
pub struct BiasFeatures;

impl FeatureMap for BiasFeatures {
    fn dim(&self) -> usize {
        1
    }

    fn features(&self, _: &[Token], _: &[Token], _: usize) -> Features {
        vec![(0, 1.0)]
    }
}

/// Policy parameters; `theta` holds one length-`F` block per vocabulary token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub version: u64,
    pub vocab_size: usize,
    pub theta: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(vocab_size: usize, feature_dim: usize) -> Self {
        PolicyParams {
            version: 0,
            vocab_size,
            theta: vec![0.0; vocab_size * feature_dim],
        }
    }

    pub fn from_theta(vocab_size: usize, theta: Vec<f64>) -> Self {
        PolicyParams {
            version: 0,
            vocab_size,
            theta,
        }
    }

    /// Parameter count `D`.
    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.theta.len() / self.vocab_size
    }

    /// Deep copy used as a frozen behavior policy.
    pub fn snapshot(&self) -> PolicyParams {
        self.clone()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.theta.len() % self.vocab_size != 0 {
            return Err(Error::Invariant(format!(
                "theta length {} is not a multiple of vocab size {}",
                self.theta.len(),
                self.vocab_size
            )));
        }
        if let Some(i) = self.theta.iter().position(|x| !x.is_finite()) {
            return Err(Error::Invariant(format!("theta[{i}] is not finite")));
        }
        Ok(())
    }

    /// Mutable access to the weight of `feature` in the block of `token`.
    pub fn weight_mut(&mut self, token: Token, feature: usize) -> &mut f64 {
        let f = self.feature_dim();
        &mut self.theta[token.id() * f + feature]
    }
}

/// `log(sum(exp(xs)))` with the max shift.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|l| (l - lse).min(0.0)).collect()
}

/// Everything needed to score and differentiate one decoding position.
#[derive(Debug, Clone)]
pub struct TokenStep {
    pub features: Features,
    pub logps: Vec<f64>,
}

impl TokenStep {
    pub fn logp(&self, token: Token) -> f64 {
        self.logps[token.id()]
    }

    /// Adds `scale * d log p(token) / d theta` into `grad`.
    pub fn accumulate_grad(&self, token: Token, scale: f64, feature_dim: usize, grad: &mut [f64]) {
        if scale == 0.0 {
            return;
        }
        for (v, lp) in self.logps.iter().enumerate() {
            let indicator = if v == token.id() { 1.0 } else { 0.0 };
            let coef = scale * (indicator - lp.exp());
            if coef == 0.0 {
                continue;
            }
            let block = &mut grad[v * feature_dim..(v + 1) * feature_dim];
            for (f, x) in &self.features {
                block[*f] += coef * x;
            }
        }
    }
}

/// A parameter vector bound to a feature map and an optional terminator.
#[derive(Clone, Copy)]
pub struct Policy<'a> {
    params: &'a PolicyParams,
    features: &'a dyn FeatureMap,
    terminator: Option<Token>,
}

impl<'a> Policy<'a> {
    pub fn new(params: &'a PolicyParams, features: &'a dyn FeatureMap) -> Self {
        debug_assert_eq!(
            params.theta.len(),
            params.vocab_size * features.dim(),
            "theta length must equal V * F"
        );
        Policy {
            params,
            features,
            terminator: None,
        }
    }

    pub fn with_terminator(mut self, terminator: Token) -> Self {
        self.terminator = Some(terminator);
        self
    }

    pub fn params(&self) -> &'a PolicyParams {
        self.params
    }

    pub fn feature_map(&self) -> &'a dyn FeatureMap {
        self.features
    }

    pub fn terminator(&self) -> Option<Token> {
        self.terminator
    }

    pub fn vocab_size(&self) -> usize {
        self.params.vocab_size
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim()
    }

    fn logits_from(&self, prefix: &[Token], features: &Features) -> Vec<f64> {
        let f = self.features.dim();
        (0..self.params.vocab_size)
            .map(|v| {
                if !self.features.allows(prefix, Token::from(v)) {
                    return f64::NEG_INFINITY;
                }
                let block = &self.params.theta[v * f..(v + 1) * f];
                features.iter().map(|(i, x)| block[*i] * x).sum()
            })
            .collect()
    }

    /// Unnormalized logits for the next token.
    pub fn token_logits(&self, context: &[Token], prefix: &[Token]) -> Vec<f64> {
        self.logits_from(prefix, &self.features.features(context, prefix, prefix.len()))
    }

    pub fn step(&self, context: &[Token], prefix: &[Token]) -> TokenStep {
        let features = self.features.features(context, prefix, prefix.len());
        let logps = log_softmax(&self.logits_from(prefix, &features));
        TokenStep { features, logps }
    }

    pub fn token_logprob(&self, context: &[Token], prefix: &[Token], token: Token) -> f64 {
        self.step(context, prefix).logp(token)
    }

    /// Per-token log-probabilities of `tokens` scored left to right.
    pub fn token_logprobs(&self, context: &[Token], tokens: &[Token]) -> Vec<f64> {
        (0..tokens.len())
            .map(|t| self.token_logprob(context, &tokens[..t], tokens[t]))
            .collect()
    }

    pub fn sequence_logprob(&self, context: &[Token], tokens: &[Token]) -> f64 {
        self.token_logprobs(context, tokens).iter().sum()
    }

    fn is_end(&self, token: Token) -> bool {
        self.terminator == Some(token)
    }

    /// Ancestral sampling of up to `budget` tokens after `prefix`.
    ///
    /// Returns the new tokens and their log-probabilities; stops after the
    /// terminator.
    pub fn sample_continuation(
        &self,
        context: &[Token],
        prefix: &[Token],
        budget: usize,
        stream: &mut RandomStream,
    ) -> (Vec<Token>, Vec<f64>) {
        let mut seq = prefix.to_vec();
        let mut logps = Vec::with_capacity(budget);
        for _ in 0..budget {
            let step = self.step(context, &seq);
            let probs: Vec<f64> = step.logps.iter().map(|lp| lp.exp()).collect();
            let token = Token::from(stream.categorical(&probs));
            logps.push(step.logp(token));
            seq.push(token);
            if self.is_end(token) {
                break;
            }
        }
        (seq.split_off(prefix.len()), logps)
    }

    pub fn sample_sequence(
        &self,
        context: &[Token],
        max_len: usize,
        stream: &mut RandomStream,
    ) -> (Vec<Token>, Vec<f64>) {
        self.sample_continuation(context, &[], max_len, stream)
    }

    /// Argmax decoding of up to `budget` tokens after `prefix`; ties go to
    /// the lowest token id.
    pub fn greedy_continuation(&self, context: &[Token], prefix: &[Token], budget: usize) -> Vec<Token> {
        let mut seq = prefix.to_vec();
        for _ in 0..budget {
            let logits = self.token_logits(context, &seq);
            let mut best = 0;
            for (v, l) in logits.iter().enumerate() {
                if *l > logits[best] {
                    best = v;
                }
            }
            let token = Token::from(best);
            seq.push(token);
            if self.is_end(token) {
                break;
            }
        }
        seq.split_off(prefix.len())
    }

    pub fn greedy_decode(&self, context: &[Token], max_len: usize) -> Vec<Token> {
        self.greedy_continuation(context, &[], max_len)
    }

    /// Exact gradient of [`Policy::sequence_logprob`] with respect to theta.
    pub fn grad_sequence_logprob(&self, context: &[Token], tokens: &[Token]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.dim()];
        for t in 0..tokens.len() {
            self.step(context, &tokens[..t])
                .accumulate_grad(tokens[t], 1.0, self.feature_dim(), &mut grad);
        }
        grad
    }
}
