//! Watermarked next-token samplers and the autoregressive generation loop.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keying::{GreenList, KeyError, MaskLedger, WatermarkKey};
use crate::lm::{LmError, NtpSource};
use crate::rng::{RngStream, UniformDraw, UniformSource};
use crate::types::{sample_weighted, GeneratedText, NtpDistribution, NtpError, TokenId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("distributions have different vocabularies ({0} vs {1})")]
    VocabMismatch(usize, usize),
    #[error("green list carries zero probability mass")]
    ZeroGreenMass,
    #[error("invalid decoder configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Ntp(#[from] NtpError),
    #[error(transparent)]
    Model(#[from] LmError),
}

/// Which half of the coupling produced the token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Overlap,
    Excess,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingOutcome {
    pub token: TokenId,
    pub branch: Branch,
    pub overlap_mass: f64,
}

/// Draws a token whose marginal law is `p` while the branch (overlap vs
/// excess) is decided by `zeta` against `Σ min(P, Q)`.
pub fn sample_maximal_coupling<R: UniformSource + ?Sized>(
    p: &NtpDistribution,
    q: &NtpDistribution,
    zeta: UniformDraw,
    aux: &mut R,
) -> Result<CouplingOutcome, DecodeError> {
    if p.len() != q.len() {
        return Err(DecodeError::VocabMismatch(p.len(), q.len()));
    }
    let overlap: Vec<f64> = p.probs().iter().zip(q.probs()).map(|(a, b)| a.min(*b)).collect();
    let excess: Vec<f64> = p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).max(0.0)).collect();
    let excess_mass: f64 = excess.iter().sum();
    // With no excess the overlap is the whole of P even if rounding says otherwise.
    let overlap_mass = if excess_mass > 0.0 { overlap.iter().sum::<f64>() } else { 1.0 };
    let u = aux.next_uniform();
    if zeta.value() <= overlap_mass {
        Ok(CouplingOutcome { token: sample_weighted(&overlap, u), branch: Branch::Overlap, overlap_mass })
    } else {
        Ok(CouplingOutcome { token: sample_weighted(&excess, u), branch: Branch::Excess, overlap_mass })
    }
}

/// `P` restricted to the green list and renormalized.
pub fn hard_list_q(
    p: &NtpDistribution,
    mut green: impl FnMut(TokenId) -> bool,
) -> Result<NtpDistribution, DecodeError> {
    let q: Vec<f64> = p
        .probs()
        .iter()
        .enumerate()
        .map(|(i, &w)| if green(TokenId::from(i)) { w } else { 0.0 })
        .collect();
    if q.iter().sum::<f64>() <= 0.0 {
        return Err(DecodeError::ZeroGreenMass);
    }
    Ok(NtpDistribution::new(q)?)
}

/// Green tokens up-weighted by `e^delta`.
pub fn mc_soft_q(
    p: &NtpDistribution,
    mut green: impl FnMut(TokenId) -> bool,
    delta: f64,
) -> NtpDistribution {
    let boost = delta.exp();
    let raw: Vec<f64> = p
        .probs()
        .iter()
        .enumerate()
        .map(|(i, &w)| if green(TokenId::from(i)) { boost * w } else { w })
        .collect();
    NtpDistribution::new(raw).expect("reweighting keeps positive mass")
}

/// DiPmark reweighting along `order`: cumulative mass `S` is mapped through
/// `F(S) = max(S - α, 0) + max(S - (1 - α), 0)` and each token receives the
/// increment of `F` at its position.
pub fn dipmark_q(p: &NtpDistribution, order: &[TokenId], alpha: f64) -> NtpDistribution {
    let f = |s: f64| (s - alpha).max(0.0) + (s - (1.0 - alpha)).max(0.0);
    let mut q = vec![0.0; p.len()];
    let mut cum = 0.0;
    let mut prev = 0.0;
    for &t in order {
        cum += p.prob(t);
        let cur = f(cum.min(1.0));
        q[t.index()] = (cur - prev).max(0.0);
        prev = cur;
    }
    NtpDistribution::new(q).expect("reweighting keeps positive mass")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Maximal coupling against the hard green list.
    Mc,
    /// Maximal coupling against the exponentially tilted green list.
    McSoft,
    Gumbel,
    Soft,
    Dipmark,
    /// No watermark.
    Plain,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Mc => "mc",
            Scheme::McSoft => "mc_soft",
            Scheme::Gumbel => "gumbel",
            Scheme::Soft => "soft",
            Scheme::Dipmark => "dipmark",
            Scheme::Plain => "plain",
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Scheme {
    type Err = DecodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "mc" => Scheme::Mc,
            "mc_soft" | "mc-soft" => Scheme::McSoft,
            "gumbel" => Scheme::Gumbel,
            "soft" => Scheme::Soft,
            "dipmark" => Scheme::Dipmark,
            "plain" => Scheme::Plain,
            other => return Err(DecodeError::InvalidConfig(format!("unknown scheme `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    pub scheme: Scheme,
    pub delta: Option<f64>,
    pub alpha_dip: Option<f64>,
    pub masking: bool,
}

impl DecoderConfig {
    pub fn new(
        scheme: Scheme,
        delta: Option<f64>,
        alpha_dip: Option<f64>,
        masking: bool,
    ) -> Result<Self, DecodeError> {
        let wants_delta = matches!(scheme, Scheme::McSoft | Scheme::Soft);
        match (wants_delta, delta) {
            (true, None) => return Err(DecodeError::InvalidConfig(format!("scheme {scheme} needs delta"))),
            (false, Some(_)) => {
                return Err(DecodeError::InvalidConfig(format!("scheme {scheme} takes no delta")))
            }
            (true, Some(d)) if !(d >= 0.0 && d.is_finite()) => {
                return Err(DecodeError::InvalidConfig(format!("delta must be finite and >= 0, got {d}")))
            }
            _ => {}
        }
        match (scheme == Scheme::Dipmark, alpha_dip) {
            (true, None) => return Err(DecodeError::InvalidConfig("dipmark needs alpha".into())),
            (false, Some(_)) => {
                return Err(DecodeError::InvalidConfig(format!("scheme {scheme} takes no alpha")))
            }
            (true, Some(a)) if !(0.0..0.5).contains(&a) => {
                return Err(DecodeError::InvalidConfig(format!("alpha must lie in [0, 0.5), got {a}")))
            }
            _ => {}
        }
        Ok(Self { scheme, delta, alpha_dip, masking })
    }

    pub fn mc() -> Self {
        Self { scheme: Scheme::Mc, delta: None, alpha_dip: None, masking: false }
    }

    pub fn with_masking(mut self, masking: bool) -> Self {
        self.masking = masking;
        self
    }
}

/// Diagnostics for one generated token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub token: TokenId,
    /// Watermark skipped because the context was already used.
    pub masked: bool,
    /// A full context was available and the key was consulted.
    pub keyed: bool,
    pub branch: Option<Branch>,
    pub green_mass: Option<f64>,
    pub zero_green_fallback: bool,
}

impl StepRecord {
    fn unkeyed(token: TokenId) -> Self {
        Self { token, masked: false, keyed: false, branch: None, green_mass: None, zero_green_fallback: false }
    }

    fn masked(token: TokenId) -> Self {
        Self { masked: true, keyed: true, ..Self::unkeyed(token) }
    }
}

fn should_mask(ledger: Option<&mut MaskLedger>, ctx: &[TokenId]) -> bool {
    ledger.map(|l| !l.check_and_record(ctx)).unwrap_or(false)
}

/// One maximal-coupling step against the hard green list.
pub fn mc_step<R: UniformSource + ?Sized>(
    p: &NtpDistribution,
    key: &WatermarkKey,
    ctx: &[TokenId],
    ledger: Option<&mut MaskLedger>,
    aux: &mut R,
) -> Result<StepRecord, DecodeError> {
    if should_mask(ledger, ctx) {
        return Ok(StepRecord::masked(p.sample(aux)));
    }
    let green = key.green_list(ctx, p.len())?;
    let green_mass = p.mass_where(|t| green.contains(t));
    let zeta = key.derive_zeta(ctx)?;
    match hard_list_q(p, |t| green.contains(t)) {
        Ok(q) => {
            let out = sample_maximal_coupling(p, &q, zeta, aux)?;
            Ok(StepRecord {
                token: out.token,
                masked: false,
                keyed: true,
                branch: Some(out.branch),
                green_mass: Some(green_mass),
                zero_green_fallback: false,
            })
        }
        Err(DecodeError::ZeroGreenMass) => Ok(StepRecord {
            token: p.sample(aux),
            masked: false,
            keyed: true,
            branch: None,
            green_mass: Some(0.0),
            zero_green_fallback: true,
        }),
        Err(e) => Err(e),
    }
}

/// Maximal coupling against the tilted distribution from [`mc_soft_q`].
pub fn mc_soft_step<R: UniformSource + ?Sized>(
    p: &NtpDistribution,
    key: &WatermarkKey,
    ctx: &[TokenId],
    delta: f64,
    ledger: Option<&mut MaskLedger>,
    aux: &mut R,
) -> Result<StepRecord, DecodeError> {
    if should_mask(ledger, ctx) {
        return Ok(StepRecord::masked(p.sample(aux)));
    }
    let green = key.green_list(ctx, p.len())?;
    let green_mass = p.mass_where(|t| green.contains(t));
    let q = mc_soft_q(p, |t| green.contains(t), delta);
    let out = sample_maximal_coupling(p, &q, key.derive_zeta(ctx)?, aux)?;
    Ok(StepRecord {
        token: out.token,
        masked: false,
        keyed: true,
        branch: Some(out.branch),
        green_mass: Some(green_mass),
        zero_green_fallback: false,
    })
}

/// Gumbel-max choice `argmax_w ln(U_w) / P_w`, with `U_w` read at counter `w`
/// of the context's ZETA stream. Zero-probability tokens never win.
pub fn gumbel_choice(p: &NtpDistribution, stream_seed: u64) -> TokenId {
    let mut best = None;
    let mut best_score = f64::NEG_INFINITY;
    for (w, &pw) in p.probs().iter().enumerate() {
        if pw <= 0.0 {
            continue;
        }
        let u = RngStream::at(stream_seed, w as u64).next_uniform();
        let score = u.ln() / pw;
        if best.is_none() || score > best_score {
            best = Some(w);
            best_score = score;
        }
    }
    TokenId::from(best.expect("distribution has positive mass"))
}

pub fn gumbel_max_step<R: UniformSource + ?Sized>(
    p: &NtpDistribution,
    key: &WatermarkKey,
    ctx: &[TokenId],
    ledger: Option<&mut MaskLedger>,
    aux: &mut R,
) -> Result<StepRecord, DecodeError> {
    if should_mask(ledger, ctx) {
        return Ok(StepRecord::masked(p.sample(aux)));
    }
    let stream = key.zeta_stream(ctx)?;
    Ok(StepRecord {
        keyed: true,
        ..StepRecord::unkeyed(gumbel_choice(p, stream.state()))
    })
}

/// Sampling straight from the tilted distribution (biased baseline).
pub fn soft_step<R: UniformSource + ?Sized>(
    p: &NtpDistribution,
    key: &WatermarkKey,
    ctx: &[TokenId],
    delta: f64,
    ledger: Option<&mut MaskLedger>,
    aux: &mut R,
) -> Result<StepRecord, DecodeError> {
    if should_mask(ledger, ctx) {
        return Ok(StepRecord::masked(p.sample(aux)));
    }
    let green = key.green_list(ctx, p.len())?;
    let green_mass = p.mass_where(|t| green.contains(t));
    let q = mc_soft_q(p, |t| green.contains(t), delta);
    Ok(StepRecord {
        green_mass: Some(green_mass),
        keyed: true,
        ..StepRecord::unkeyed(q.sample(aux))
    })
}

/// DiPmark step. The green set is the head of the keyed permutation, so the
/// reweighting runs over the reversed permutation to favour green tokens.
pub fn dipmark_step<R: UniformSource + ?Sized>(
    p: &NtpDistribution,
    key: &WatermarkKey,
    ctx: &[TokenId],
    alpha: f64,
    ledger: Option<&mut MaskLedger>,
    aux: &mut R,
) -> Result<StepRecord, DecodeError> {
    if should_mask(ledger, ctx) {
        return Ok(StepRecord::masked(p.sample(aux)));
    }
    let perm = key.permutation(ctx, p.len())?;
    let green_mass: f64 = perm.green().iter().map(|&t| p.prob(t)).sum();
    let reversed: Vec<TokenId> = perm.order.iter().rev().copied().collect();
    let q = dipmark_q(p, &reversed, alpha);
    Ok(StepRecord {
        green_mass: Some(green_mass),
        keyed: true,
        ..StepRecord::unkeyed(q.sample(aux))
    })
}

/// Green list a detector should use for `scheme` at this context.
pub fn scheme_green_list(
    scheme: Scheme,
    key: &WatermarkKey,
    ctx: &[TokenId],
    vocab_size: usize,
) -> Result<GreenList, KeyError> {
    match scheme {
        Scheme::Dipmark => Ok(key.permutation(ctx, vocab_size)?.into_green_list()),
        _ => key.green_list(ctx, vocab_size),
    }
}

/// One step of `config.scheme` with context `ctx`.
pub fn scheme_step<R: UniformSource + ?Sized>(
    p: &NtpDistribution,
    key: &WatermarkKey,
    config: &DecoderConfig,
    ctx: &[TokenId],
    ledger: Option<&mut MaskLedger>,
    aux: &mut R,
) -> Result<StepRecord, DecodeError> {
    match config.scheme {
        Scheme::Mc => mc_step(p, key, ctx, ledger, aux),
        Scheme::McSoft => mc_soft_step(p, key, ctx, config.delta.unwrap_or(0.0), ledger, aux),
        Scheme::Gumbel => gumbel_max_step(p, key, ctx, ledger, aux),
        Scheme::Soft => soft_step(p, key, ctx, config.delta.unwrap_or(0.0), ledger, aux),
        Scheme::Dipmark => dipmark_step(p, key, ctx, config.alpha_dip.unwrap_or(0.0), ledger, aux),
        Scheme::Plain => Ok(StepRecord::unkeyed(p.sample(aux))),
    }
}

/// A generated text with its per-step diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: GeneratedText,
    pub steps: Vec<StepRecord>,
}

impl Generation {
    /// Fraction of steps whose watermark was masked by a repeated context.
    pub fn repeated_rate(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().filter(|s| s.masked).count() as f64 / self.steps.len() as f64
    }
}

/// Appends `n` tokens to `prompt`. The context of each step is the trailing
/// `k` tokens of the full history; steps with a shorter history are sampled
/// from the model without the key.
pub fn generate<M: NtpSource + ?Sized>(
    model: &M,
    key: &WatermarkKey,
    config: &DecoderConfig,
    prompt: &GeneratedText,
    n: usize,
    aux: &mut RngStream,
) -> Result<Generation, DecodeError> {
    if n == 0 {
        return Err(DecodeError::InvalidConfig("n must be at least 1".into()));
    }
    let mut tokens = prompt.tokens.clone();
    tokens.reserve(n);
    let mut steps = Vec::with_capacity(n);
    let mut ledger = MaskLedger::new();
    for _ in 0..n {
        let p = model.next_ntp(&tokens)?;
        let record = match key.context_of(&tokens) {
            Some(ctx) if config.scheme != Scheme::Plain => {
                let ledger = config.masking.then_some(&mut ledger);
                scheme_step(&p, key, config, ctx, ledger, aux)?
            }
            _ => StepRecord::unkeyed(p.sample(aux)),
        };
        tokens.push(record.token);
        steps.push(record);
    }
    Ok(Generation { text: GeneratedText::new(tokens, prompt.prompt_len), steps })
}
