//! Watermark key material.
//!
//! A [`WatermarkKey`] holds a 64-bit master secret and derives, from the
//! previous `k` tokens, two independent pseudorandom quantities per step: the
//! green list and the pivot `ζ`. A third derivation produces the keyed
//! vocabulary permutation used for exact-size green lists and by DiPmark.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::rng::{finalize, fold_words, unit_from_bits, RngStream, UniformDraw, GOLDEN};
use crate::types::TokenId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeyError {
    #[error("context has {got} tokens, key expects k = {expected}")]
    ContextLengthMismatch { expected: usize, got: usize },
    #[error("green fraction must lie in (0, 1), got {0}")]
    InvalidGamma(f64),
    #[error("operation not available in green mode `{0}`")]
    ModeMismatch(GreenMode),
    #[error("malformed key string `{0}`")]
    Parse(String),
}

/// How green lists are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GreenMode {
    /// Each (context, token) pair is green with probability `γ`.
    Hash,
    /// A single hash-membership list shared by every step.
    FixedSingleList,
    /// The first `⌊γ·|W|⌋` entries of a keyed per-step permutation.
    PerStepPermutation,
}

impl GreenMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GreenMode::Hash => "hash",
            GreenMode::FixedSingleList => "fixed",
            GreenMode::PerStepPermutation => "perm",
        }
    }
}

impl fmt::Display for GreenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GreenMode {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hash" => Ok(GreenMode::Hash),
            "fixed" => Ok(GreenMode::FixedSingleList),
            "perm" => Ok(GreenMode::PerStepPermutation),
            other => Err(KeyError::Parse(format!("unknown mode `{other}`"))),
        }
    }
}

/// Separates the three uses of the key so their streams never coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedTag {
    Green,
    Zeta,
    Perm,
}

impl SeedTag {
    pub const fn constant(self) -> u64 {
        match self {
            SeedTag::Green => 0x11,
            SeedTag::Zeta => 0x22,
            SeedTag::Perm => 0x33,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WatermarkKey {
    pub master: u64,
    pub k: usize,
    gamma: f64,
    pub mode: GreenMode,
}

impl WatermarkKey {
    pub fn new(master: u64, k: usize, gamma: f64, mode: GreenMode) -> Result<Self, KeyError> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(KeyError::InvalidGamma(gamma));
        }
        Ok(Self { master, k, gamma, mode })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    fn check_context(&self, ctx: &[TokenId]) -> Result<(), KeyError> {
        if ctx.len() != self.k {
            return Err(KeyError::ContextLengthMismatch { expected: self.k, got: ctx.len() });
        }
        Ok(())
    }

    /// The trailing `k` tokens of `history`, or `None` if it is too short.
    pub fn context_of<'a>(&self, history: &'a [TokenId]) -> Option<&'a [TokenId]> {
        (history.len() >= self.k).then(|| &history[history.len() - self.k..])
    }

    /// Folds the context into the master secret.
    pub fn derive_seed(&self, ctx: &[TokenId], tag: SeedTag) -> Result<u64, KeyError> {
        self.check_context(ctx)?;
        Ok(self.seed_unchecked(ctx, tag))
    }

    fn seed_unchecked(&self, ctx: &[TokenId], tag: SeedTag) -> u64 {
        fold_words(self.master ^ tag.constant(), ctx.iter().map(|t| t.0 as u64))
    }

    /// Green membership for hash and fixed-single-list modes.
    pub fn is_green(&self, ctx: &[TokenId], token: TokenId) -> Result<bool, KeyError> {
        let seed = match self.mode {
            GreenMode::Hash => self.derive_seed(ctx, SeedTag::Green)?,
            GreenMode::FixedSingleList => self.seed_unchecked(&[], SeedTag::Green),
            GreenMode::PerStepPermutation => return Err(KeyError::ModeMismatch(self.mode)),
        };
        Ok(hashed_membership(seed, token, self.gamma))
    }

    /// Keyed Fisher–Yates permutation of the vocabulary for this context.
    pub fn permutation(&self, ctx: &[TokenId], vocab_size: usize) -> Result<KeyedPermutation, KeyError> {
        let seed = self.derive_seed(ctx, SeedTag::Perm)?;
        let mut order: Vec<TokenId> = (0..vocab_size).map(TokenId::from).collect();
        RngStream::new(seed).shuffle(&mut order);
        let green_len = (self.gamma * vocab_size as f64).floor() as usize;
        Ok(KeyedPermutation { order, green_len })
    }

    /// Exact-size green set (per-step-permutation mode).
    pub fn green_set_exact(&self, ctx: &[TokenId], vocab_size: usize) -> Result<HashSet<TokenId>, KeyError> {
        if self.mode != GreenMode::PerStepPermutation {
            return Err(KeyError::ModeMismatch(self.mode));
        }
        Ok(self.permutation(ctx, vocab_size)?.green().iter().copied().collect())
    }

    /// Green list for one step in whatever mode the key uses.
    pub fn green_list(&self, ctx: &[TokenId], vocab_size: usize) -> Result<GreenList, KeyError> {
        match self.mode {
            GreenMode::Hash => Ok(GreenList::Hashed {
                seed: self.derive_seed(ctx, SeedTag::Green)?,
                gamma: self.gamma,
            }),
            GreenMode::FixedSingleList => Ok(GreenList::Hashed {
                seed: self.seed_unchecked(&[], SeedTag::Green),
                gamma: self.gamma,
            }),
            GreenMode::PerStepPermutation => Ok(self.permutation(ctx, vocab_size)?.into_green_list()),
        }
    }

    /// Pivot `ζ`: first draw of the ZETA stream.
    pub fn derive_zeta(&self, ctx: &[TokenId]) -> Result<UniformDraw, KeyError> {
        Ok(RngStream::new(self.derive_seed(ctx, SeedTag::Zeta)?).next_draw())
    }

    /// Stream seeded by the ZETA seed; the Gumbel-max decoder reads `U_w` at counter `w`.
    pub fn zeta_stream(&self, ctx: &[TokenId]) -> Result<RngStream, KeyError> {
        Ok(RngStream::new(self.derive_seed(ctx, SeedTag::Zeta)?))
    }

    /// Null-hypothesis probability that a token is green.
    pub fn green_fraction(&self, vocab_size: usize) -> f64 {
        match self.mode {
            GreenMode::PerStepPermutation => {
                (self.gamma * vocab_size as f64).floor() / vocab_size as f64
            }
            _ => self.gamma,
        }
    }
}

fn hashed_membership(seed: u64, token: TokenId, gamma: f64) -> bool {
    let token_hash = finalize((token.0 as u64 + 1).wrapping_mul(GOLDEN));
    unit_from_bits(finalize(seed ^ token_hash)) < gamma
}

impl fmt::Display for WatermarkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}:k={}:g={}:mode={}", self.master, self.k, self.gamma, self.mode)
    }
}

/// Parses `<16 hex digits>:k=<int>:g=<real>:mode=<hash|fixed|perm>`.
impl FromStr for WatermarkKey {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || KeyError::Parse(s.to_string());
        let mut parts = s.split(':');
        let hex = parts.next().ok_or_else(bad)?;
        if hex.len() != 16 {
            return Err(bad());
        }
        let master = u64::from_str_radix(hex, 16).map_err(|_| bad())?;
        let mut k = None;
        let mut gamma = None;
        let mut mode = None;
        for part in parts {
            let (name, value) = part.split_once('=').ok_or_else(bad)?;
            match name {
                "k" if k.is_none() => k = Some(value.parse::<usize>().map_err(|_| bad())?),
                "g" if gamma.is_none() => gamma = Some(value.parse::<f64>().map_err(|_| bad())?),
                "mode" if mode.is_none() => mode = Some(value.parse::<GreenMode>()?),
                _ => return Err(bad()),
            }
        }
        WatermarkKey::new(master, k.ok_or_else(bad)?, gamma.ok_or_else(bad)?, mode.ok_or_else(bad)?)
    }
}

/// A keyed vocabulary permutation; its first `green_len` entries are green.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyedPermutation {
    pub order: Vec<TokenId>,
    pub green_len: usize,
}

impl KeyedPermutation {
    pub fn green(&self) -> &[TokenId] {
        &self.order[..self.green_len]
    }

    pub fn into_green_list(self) -> GreenList {
        let mut mask = vec![false; self.order.len()];
        for t in self.green() {
            mask[t.index()] = true;
        }
        GreenList::Exact { mask }
    }
}

/// Green-list membership for one decoding step.
#[derive(Debug, Clone, PartialEq)]
pub enum GreenList {
    Hashed { seed: u64, gamma: f64 },
    Exact { mask: Vec<bool> },
}

impl GreenList {
    #[inline]
    pub fn contains(&self, token: TokenId) -> bool {
        match self {
            GreenList::Hashed { seed, gamma } => hashed_membership(*seed, token, *gamma),
            GreenList::Exact { mask } => mask.get(token.index()).copied().unwrap_or(false),
        }
    }
}

/// Contexts that have already carried a watermark in the current generation.
#[derive(Debug, Clone, Default)]
pub struct MaskLedger {
    seen: HashSet<Vec<TokenId>>,
}

impl MaskLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// True when the watermark should be applied (context unseen). The context
    /// is recorded either way.
    pub fn check_and_record(&mut self, ctx: &[TokenId]) -> bool {
        if self.seen.contains(ctx) {
            false
        } else {
            self.seen.insert(ctx.to_vec());
            true
        }
    }

    pub fn contains(&self, ctx: &[TokenId]) -> bool {
        self.seen.contains(ctx)
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}
