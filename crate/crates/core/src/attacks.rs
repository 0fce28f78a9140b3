//! Post-generation text modification: random substitution and a
//! speculative-decoding "lazy editor" that re-validates a watermarked draft
//! against a target model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoders::{gumbel_choice, DecodeError, Scheme};
use crate::keying::WatermarkKey;
use crate::lm::NtpSource;
use crate::rng::{RngStream, UniformDraw, UniformSource};
use crate::types::{sample_weighted, GeneratedText, NtpDistribution, TokenId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

impl From<crate::lm::LmError> for AttackError {
    fn from(e: crate::lm::LmError) -> Self {
        AttackError::Decode(e.into())
    }
}

impl From<crate::keying::KeyError> for AttackError {
    fn from(e: crate::keying::KeyError) -> Self {
        AttackError::Decode(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttackConfig {
    Substitute { rate: f64 },
    SpecDec { accept_scale: f64, lookahead: usize },
}

pub const DEFAULT_ACCEPT_SCALE: f64 = 0.5;
pub const DEFAULT_LOOKAHEAD: usize = 4;

impl AttackConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        match *self {
            AttackConfig::Substitute { rate } if !(0.0..=1.0).contains(&rate) => {
                Err(AttackError::InvalidConfig(format!("rate must lie in [0, 1], got {rate}")))
            }
            AttackConfig::SpecDec { accept_scale, .. } if !(accept_scale > 0.0 && accept_scale <= 1.0) => Err(
                AttackError::InvalidConfig(format!("accept scale must lie in (0, 1], got {accept_scale}")),
            ),
            AttackConfig::SpecDec { lookahead: 0, .. } => {
                Err(AttackError::InvalidConfig("lookahead must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Replaces each non-prompt token, independently with probability `rate`, by
/// a uniformly chosen different token. Returns the text and the replacement count.
pub fn substitute(
    text: &GeneratedText,
    rate: f64,
    rng: &mut RngStream,
    vocab_size: usize,
) -> Result<(GeneratedText, usize), AttackError> {
    AttackConfig::Substitute { rate }.validate()?;
    if vocab_size < 2 {
        return Err(AttackError::InvalidConfig("substitution needs a vocabulary of at least 2".into()));
    }
    let mut tokens = text.tokens.clone();
    let mut replaced = 0;
    for tok in tokens[text.prompt_len..].iter_mut() {
        if rng.next_uniform() < rate {
            let mut new = rng.next_below(vocab_size as u64 - 1) as u32;
            if new >= tok.0 {
                new += 1;
            }
            *tok = TokenId(new);
            replaced += 1;
        }
    }
    Ok((GeneratedText::new(tokens, text.prompt_len), replaced))
}

/// Speculative-sampling verification of one draft token. The draft `w ~ Q`
/// is drawn from `aux`; it is kept iff `accept_scale · ζ · Q_w <= P_w`,
/// otherwise a replacement is drawn from the normalized excess `max(0, P - Q)`.
pub fn specdec_one_step<R: UniformSource + ?Sized>(
    p: &NtpDistribution,
    q: &NtpDistribution,
    zeta: UniformDraw,
    aux: &mut R,
    accept_scale: f64,
) -> Result<(TokenId, bool), AttackError> {
    if p.len() != q.len() {
        return Err(DecodeError::VocabMismatch(p.len(), q.len()).into());
    }
    let w = q.sample(aux);
    Ok(verify_draft(p, q, w, zeta, aux, accept_scale))
}

fn verify_draft<R: UniformSource + ?Sized>(
    p: &NtpDistribution,
    q: &NtpDistribution,
    w: TokenId,
    zeta: UniformDraw,
    aux: &mut R,
    accept_scale: f64,
) -> (TokenId, bool) {
    if accept_scale * zeta.value() * q.prob(w) <= p.prob(w) {
        return (w, true);
    }
    let excess: Vec<f64> = p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).max(0.0)).collect();
    let u = aux.next_uniform();
    if excess.iter().sum::<f64>() > 0.0 {
        (sample_weighted(&excess, u), false)
    } else {
        (sample_weighted(p.probs(), u), false)
    }
}

/// Next-token distribution actually followed by a watermarked draft:
/// for the coupling decoder the green- or red-conditional restriction picked
/// by `ζ̃`, for Gumbel-max the one-hot choice. Unkeyed steps return `P̃`.
pub fn watermarked_draft_q(
    p: &NtpDistribution,
    key: &WatermarkKey,
    scheme: Scheme,
    ctx: Option<&[TokenId]>,
) -> Result<NtpDistribution, AttackError> {
    let Some(ctx) = ctx else { return Ok(p.clone()) };
    match scheme {
        Scheme::Mc => {
            let green = key.green_list(ctx, p.len())?;
            let green_mass = p.mass_where(|t| green.contains(t));
            if green_mass <= 0.0 || green_mass >= 1.0 {
                return Ok(p.clone());
            }
            let pick_green = key.derive_zeta(ctx)?.value() <= green_mass;
            let raw: Vec<f64> = p
                .probs()
                .iter()
                .enumerate()
                .map(|(i, &w)| if green.contains(TokenId::from(i)) == pick_green { w } else { 0.0 })
                .collect();
            Ok(NtpDistribution::new(raw).map_err(DecodeError::from)?)
        }
        Scheme::Gumbel => {
            let seed = key.zeta_stream(ctx)?.state();
            Ok(NtpDistribution::one_hot(p.len(), gumbel_choice(p, seed)))
        }
        Scheme::Plain => Ok(p.clone()),
        other => Err(AttackError::InvalidConfig(format!("speculative editing supports mc, gumbel and plain drafts, not {other}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecDecStats {
    pub drafted: usize,
    pub rejected: usize,
    pub rejection_rate: f64,
    /// `accepted_run_lengths[j]` counts rounds whose first `j` drafts were accepted.
    pub accepted_run_lengths: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecDecConfig {
    pub accept_scale: f64,
    pub lookahead: usize,
}

impl Default for SpecDecConfig {
    fn default() -> Self {
        Self { accept_scale: DEFAULT_ACCEPT_SCALE, lookahead: DEFAULT_LOOKAHEAD }
    }
}

/// Rewrites `n` tokens after `prompt`: a watermarked draft proposes up to
/// `lookahead` tokens, the target keeps the prefix up to the first rejection
/// and resamples that position. Draft sampling and the accept test use two
/// streams derived from `seed`; neither touches the watermark key.
#[allow(clippy::too_many_arguments)]
pub fn specdec_postprocess<D: NtpSource + ?Sized, T: NtpSource + ?Sized>(
    draft: &D,
    draft_scheme: Scheme,
    target: &T,
    key: &WatermarkKey,
    config: SpecDecConfig,
    prompt: &GeneratedText,
    n: usize,
    seed: u64,
) -> Result<(GeneratedText, SpecDecStats), AttackError> {
    AttackConfig::SpecDec { accept_scale: config.accept_scale, lookahead: config.lookahead }.validate()?;
    if draft.vocab_size() != target.vocab_size() {
        return Err(DecodeError::VocabMismatch(draft.vocab_size(), target.vocab_size()).into());
    }
    let mut draft_rng = RngStream::derive(seed, &[1]);
    let mut accept_rng = RngStream::derive(seed, &[2]);
    let mut tokens = prompt.tokens.clone();
    let mut runs = vec![0u64; config.lookahead + 1];
    let (mut drafted, mut rejected) = (0usize, 0usize);

    while tokens.len() - prompt.prompt_len < n {
        let remaining = n - (tokens.len() - prompt.prompt_len);
        let budget = remaining.min(config.lookahead);
        let mut proposal = tokens.clone();
        let mut drafts: Vec<(TokenId, NtpDistribution)> = Vec::with_capacity(budget);
        for _ in 0..budget {
            let p_draft = draft.next_ntp(&proposal)?;
            let q = watermarked_draft_q(&p_draft, key, draft_scheme, key.context_of(&proposal))?;
            let w = q.sample(&mut draft_rng);
            proposal.push(w);
            drafts.push((w, q));
        }
        let mut accepted = 0;
        for (w, q) in drafts {
            let p = target.next_ntp(&tokens)?;
            let zeta = accept_rng.next_draw();
            let (tok, ok) = verify_draft(&p, &q, w, zeta, &mut accept_rng, config.accept_scale);
            drafted += 1;
            tokens.push(tok);
            if ok {
                accepted += 1;
            } else {
                rejected += 1;
                break;
            }
        }
        runs[accepted] += 1;
    }
    let stats = SpecDecStats {
        drafted,
        rejected,
        rejection_rate: if drafted == 0 { 0.0 } else { rejected as f64 / drafted as f64 },
        accepted_run_lengths: runs,
    };
    Ok((GeneratedText::new(tokens, prompt.prompt_len), stats))
}
