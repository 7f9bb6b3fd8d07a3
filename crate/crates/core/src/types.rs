//! Shared domain types: tokens, the fixed vocabulary layout, queries,
//! rollouts and groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into a fixed per-environment vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(pub u16);

impl Token {
    pub fn id(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for Token {
    fn from(id: usize) -> Self {
        Token(id as u16)
    }
}

/// The three trigger families used for forced and spontaneous rethinking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerCategory {
    SelfVerification,
    SelfCorrection,
    SelfQuestioning,
}

impl TriggerCategory {
    pub const ALL: [TriggerCategory; 3] = [
        TriggerCategory::SelfVerification,
        TriggerCategory::SelfCorrection,
        TriggerCategory::SelfQuestioning,
    ];

    pub fn index(self) -> usize {
        match self {
            TriggerCategory::SelfVerification => 0,
            TriggerCategory::SelfCorrection => 1,
            TriggerCategory::SelfQuestioning => 2,
        }
    }
}

/// Number of non-digit tokens in the vocabulary layout.
pub const SPECIAL_TOKENS: usize = 8;
/// Largest vocabulary supported at desk scale.
pub const MAX_VOCAB: usize = 64;

/// Vocabulary layout shared by environments, policies and the verifier.
///
/// Ids `0..digits` are answer digits, followed by the answer terminator,
/// one trigger-start token per [`TriggerCategory`], a filler token used to
/// pad multi-token triggers, and three context markers (add, mul, recall).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    digits: usize,
}

impl Vocab {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if !(SPECIAL_TOKENS + 2..=MAX_VOCAB).contains(&vocab_size) {
            return Err(Error::InvalidTaskSpec(format!(
                "vocab_size must lie in [{}, {MAX_VOCAB}], got {vocab_size}",
                SPECIAL_TOKENS + 2
            )));
        }
        Ok(Vocab {
            digits: vocab_size - SPECIAL_TOKENS,
        })
    }

    pub fn size(&self) -> usize {
        self.digits + SPECIAL_TOKENS
    }

    pub fn num_digits(&self) -> usize {
        self.digits
    }

    pub fn digit(&self, value: usize) -> Token {
        assert!(value < self.digits, "digit {value} out of range");
        Token::from(value)
    }

    pub fn is_digit(&self, token: Token) -> bool {
        token.id() < self.digits
    }

    pub fn terminator(&self) -> Token {
        Token::from(self.digits)
    }

    pub fn trigger_start(&self, category: TriggerCategory) -> Token {
        Token::from(self.digits + 1 + category.index())
    }

    pub fn trigger_category(&self, token: Token) -> Option<TriggerCategory> {
        TriggerCategory::ALL
            .into_iter()
            .find(|c| self.trigger_start(*c) == token)
    }

    pub fn is_trigger_start(&self, token: Token) -> bool {
        self.trigger_category(token).is_some()
    }

    pub fn filler(&self) -> Token {
        Token::from(self.digits + 4)
    }

    pub fn op_add(&self) -> Token {
        Token::from(self.digits + 5)
    }

    pub fn op_mul(&self) -> Token {
        Token::from(self.digits + 6)
    }

    pub fn recall_marker(&self) -> Token {
        Token::from(self.digits + 7)
    }

    pub fn contains(&self, token: Token) -> bool {
        token.id() < self.size()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Eval,
}

/// A verifiable synthetic task instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub context: Vec<Token>,
    pub truth: Vec<Token>,
    pub difficulty: f64,
    pub split: Split,
}

impl Query {
    pub fn validate(&self) -> Result<()> {
        if self.context.is_empty() || self.truth.is_empty() {
            return Err(Error::Invariant(format!(
                "query {}: context and truth must be non-empty",
                self.id
            )));
        }
        if !(0.0..=1.0).contains(&self.difficulty) {
            return Err(Error::Invariant(format!(
                "query {}: difficulty {} outside [0, 1]",
                self.id, self.difficulty
            )));
        }
        Ok(())
    }
}

/// One sampled response `y = y1 ⊕ trigger ⊕ y2` with its behavior log-probs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub query_id: u64,
    pub tokens: Vec<Token>,
    /// Exclusive end of the initial segment.
    pub seg_y1_end: usize,
    /// Half-open span of an inserted trigger; `y2` is `tokens[end..]`.
    pub trigger_span: Option<(usize, usize)>,
    pub behavior_logps: Vec<f64>,
    pub reward: f64,
    pub trigger_category: Option<TriggerCategory>,
    pub forced: bool,
}

impl Rollout {
    /// A plain (un-augmented) rollout. Reward is filled in by the verifier.
    pub fn plain(query_id: u64, tokens: Vec<Token>, behavior_logps: Vec<f64>) -> Self {
        let len = tokens.len();
        Rollout {
            query_id,
            tokens,
            seg_y1_end: len,
            trigger_span: None,
            behavior_logps,
            reward: 0.0,
            trigger_category: None,
            forced: false,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Whether token `t` was chosen by the policy (forced trigger tokens were not).
    pub fn is_policy_token(&self, t: usize) -> bool {
        match self.trigger_span {
            Some((start, end)) if self.forced => !(start..end).contains(&t),
            _ => true,
        }
    }

    /// Tokens of the rethink segment, empty when un-augmented.
    pub fn y2(&self) -> &[Token] {
        match self.trigger_span {
            Some((_, end)) => &self.tokens[end..],
            None => &[],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Invariant(format!("rollout for query {}: {msg}", self.query_id)));
        if self.behavior_logps.len() != self.tokens.len() {
            return fail(format!(
                "{} log-probs for {} tokens",
                self.behavior_logps.len(),
                self.tokens.len()
            ));
        }
        if let Some((i, lp)) = self.behavior_logps.iter().enumerate().find(|(_, lp)| !(**lp <= 0.0)) {
            return fail(format!("log-prob {lp} at {i} is not <= 0"));
        }
        if let Some((start, end)) = self.trigger_span {
            if start == 0 || start != self.seg_y1_end || end > self.tokens.len() || end <= start {
                return fail(format!(
                    "trigger span ({start}, {end}) inconsistent with y1 end {} and length {}",
                    self.seg_y1_end,
                    self.tokens.len()
                ));
            }
        }
        if self.reward != 0.0 && self.reward != 1.0 {
            return fail(format!("reward {} not in {{0, 1}}", self.reward));
        }
        Ok(())
    }
}

/// A query with its `G` rollouts and group-normalized advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub query: Query,
    pub rollouts: Vec<Rollout>,
    pub advantages: Vec<f64>,
    pub step_created: u64,
}

impl Group {
    pub fn rewards(&self) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.reward).collect()
    }

    /// True iff at least one advantage is non-zero.
    pub fn is_effective(&self) -> bool {
        self.advantages.iter().any(|a| a.abs() > 0.0)
    }

    /// Debug validator for the group invariants.
    pub fn validate(&self) -> Result<()> {
        let g = self.rollouts.len();
        if g != self.advantages.len() {
            return Err(Error::Invariant(format!(
                "group {}: {} rollouts but {} advantages",
                self.query.id,
                g,
                self.advantages.len()
            )));
        }
        for r in &self.rollouts {
            r.validate()?;
        }
        let rewards = self.rewards();
        let uniform = rewards.windows(2).all(|w| w[0] == w[1]);
        if uniform {
            if self.advantages.iter().any(|a| *a != 0.0) {
                return Err(Error::Invariant(format!(
                    "group {}: uniform rewards with non-zero advantages",
                    self.query.id
                )));
            }
            return Ok(());
        }
        let n = g as f64;
        let mean = self.advantages.iter().sum::<f64>() / n;
        let var = self.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        if mean.abs() > 1e-9 || (var.sqrt() - 1.0).abs() > 1e-6 {
            return Err(Error::Invariant(format!(
                "group {}: advantages have mean {mean:e} and std {}",
                self.query.id,
                var.sqrt()
            )));
        }
        Ok(())
    }
}
