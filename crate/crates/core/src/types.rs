//! Shared domain types: tokens, validated next-token distributions and
//! generated texts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::UniformSource;

/// Index of a token in the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for TokenId {
    fn from(i: usize) -> Self {
        TokenId(i as u32)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NtpError {
    #[error("probability vector is empty")]
    EmptyVector,
    #[error("negative probability {value} at index {index}")]
    NegativeEntry { index: usize, value: f64 },
    #[error("non-finite probability at index {0}")]
    NonFinite(usize),
    #[error("probability vector has zero total mass")]
    ZeroMass,
    #[error("probabilities sum to {0}, not 1 within 1e-6")]
    NotNormalized(f64),
}

/// Tolerance on the raw sum accepted in strict mode.
pub const STRICT_SUM_TOLERANCE: f64 = 1e-6;

/// A probability vector over the vocabulary. Entries are non-negative and sum
/// to one within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct NtpDistribution {
    probs: Vec<f64>,
}

impl NtpDistribution {
    /// Normalizes `raw`. In strict mode the raw sum must already be within
    /// [`STRICT_SUM_TOLERANCE`] of one.
    pub fn from_raw(raw: Vec<f64>, strict: bool) -> Result<Self, NtpError> {
        if raw.is_empty() {
            return Err(NtpError::EmptyVector);
        }
        for (index, &value) in raw.iter().enumerate() {
            if !value.is_finite() {
                return Err(NtpError::NonFinite(index));
            }
            if value < 0.0 {
                return Err(NtpError::NegativeEntry { index, value });
            }
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(NtpError::ZeroMass);
        }
        if strict && (sum - 1.0).abs() > STRICT_SUM_TOLERANCE {
            return Err(NtpError::NotNormalized(sum));
        }
        let mut probs = raw;
        // Vectors that are already normalized to rounding precision keep their exact bits.
        if (sum - 1.0).abs() > 1e-12 {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(Self { probs })
    }

    /// Non-strict construction.
    pub fn new(raw: Vec<f64>) -> Result<Self, NtpError> {
        Self::from_raw(raw, false)
    }

    pub fn uniform(vocab_size: usize) -> Self {
        assert!(vocab_size > 0, "vocabulary must be non-empty");
        Self { probs: vec![1.0 / vocab_size as f64; vocab_size] }
    }

    pub fn one_hot(vocab_size: usize, token: TokenId) -> Self {
        let mut probs = vec![0.0; vocab_size];
        probs[token.index()] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token.index()]
    }

    /// Total mass of the tokens accepted by `pred`.
    pub fn mass_where(&self, mut pred: impl FnMut(TokenId) -> bool) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .filter(|&(i, _)| pred(TokenId::from(i)))
            .map(|(_, &p)| p)
            .sum()
    }

    /// Inverse-CDF draw in token order.
    pub fn sample<R: UniformSource + ?Sized>(&self, rng: &mut R) -> TokenId {
        sample_weighted(&self.probs, rng.next_uniform())
    }

    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }

    pub fn total_variation(&self, other: &NtpDistribution) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Inverse-CDF selection over unnormalized non-negative weights using a
/// single draw `u` in `[0, 1)`. Zero-weight entries are never returned.
pub fn sample_weighted(weights: &[f64], u: f64) -> TokenId {
    let total: f64 = weights.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last_positive = i;
        if target < acc {
            return TokenId::from(i);
        }
    }
    // Rounding can leave `target` at the very top of the range.
    TokenId::from(last_positive)
}

/// A token sequence whose first `prompt_len` tokens are the prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedText {
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
}

impl GeneratedText {
    pub fn new(tokens: Vec<TokenId>, prompt_len: usize) -> Self {
        assert!(prompt_len <= tokens.len(), "prompt longer than text");
        Self { tokens, prompt_len }
    }

    pub fn from_prompt(prompt: Vec<TokenId>) -> Self {
        let prompt_len = prompt.len();
        Self { tokens: prompt, prompt_len }
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.prompt_len]
    }

    /// Tokens after the prompt; this is what a detector receives.
    pub fn continuation(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}
