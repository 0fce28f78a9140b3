//! Next-token sources standing in for a language model.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::Arc;

use lru::LruCache;
use parking_lot::Mutex;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{fold_words, RngStream};
use crate::types::{NtpDistribution, TokenId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmError {
    #[error("malformed trace at line {line}: {reason}")]
    MalformedTrace { line: usize, reason: String },
    #[error("trace has no step {0}")]
    EndOfTrace(usize),
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for LmError {
    fn from(e: std::io::Error) -> Self {
        LmError::Io(e.to_string())
    }
}

/// Anything that produces a next-token distribution from a token history.
pub trait NtpSource: Sync {
    fn vocab_size(&self) -> usize;
    fn next_ntp(&self, history: &[TokenId]) -> Result<NtpDistribution, LmError>;
}

pub const DEFAULT_ROW_CACHE: usize = 1 << 20;

/// Order-`order` Markov model whose rows are Dirichlet(`concentration`)
/// draws keyed by the context, then tempered.
pub struct MarkovSource {
    order: usize,
    vocab_size: usize,
    concentration: f64,
    seed: u64,
    temperature: f64,
    rows: Mutex<LruCache<Vec<TokenId>, Arc<NtpDistribution>>>,
}

impl std::fmt::Debug for MarkovSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MarkovSource")
            .field("order", &self.order)
            .field("vocab_size", &self.vocab_size)
            .field("concentration", &self.concentration)
            .field("seed", &self.seed)
            .field("temperature", &self.temperature)
            .finish()
    }
}

impl MarkovSource {
    pub fn new(
        order: usize,
        vocab_size: usize,
        concentration: f64,
        seed: u64,
        temperature: f64,
    ) -> Result<Self, LmError> {
        Self::with_cache_capacity(order, vocab_size, concentration, seed, temperature, DEFAULT_ROW_CACHE)
    }

    pub fn with_cache_capacity(
        order: usize,
        vocab_size: usize,
        concentration: f64,
        seed: u64,
        temperature: f64,
        capacity: usize,
    ) -> Result<Self, LmError> {
        if vocab_size == 0 {
            return Err(LmError::InvalidParams("vocab must be positive".into()));
        }
        if !(concentration > 0.0 && concentration.is_finite()) {
            return Err(LmError::InvalidParams(format!("concentration must be > 0, got {concentration}")));
        }
        if !(temperature > 0.0) {
            return Err(LmError::InvalidParams(format!("temperature must be > 0, got {temperature}")));
        }
        let capacity = NonZeroUsize::new(capacity)
            .ok_or_else(|| LmError::InvalidParams("row cache capacity must be positive".into()))?;
        Ok(Self {
            order,
            vocab_size,
            concentration,
            seed,
            temperature,
            rows: Mutex::new(LruCache::new(capacity)),
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cached_rows(&self) -> usize {
        self.rows.lock().len()
    }

    /// Row for an explicit context, bypassing the cache.
    pub fn synthesize_row(&self, ctx: &[TokenId]) -> NtpDistribution {
        let ctx_hash = fold_words(ctx.len() as u64, ctx.iter().map(|t| t.0 as u64));
        let mut rng = RngStream::new(self.seed ^ ctx_hash);
        let gamma = Gamma::new(self.concentration, 1.0).expect("validated shape");
        let draws: Vec<f64> = (0..self.vocab_size).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        if !(total > 0.0) {
            return NtpDistribution::uniform(self.vocab_size);
        }
        let exponent = 1.0 / self.temperature;
        // Work in log space relative to the largest entry so tempering cannot underflow to all-zero.
        let max = draws.iter().cloned().fold(0.0, f64::max);
        let tempered: Vec<f64> = draws
            .iter()
            .map(|&d| if d > 0.0 { ((d / max).ln() * exponent).exp() } else { 0.0 })
            .collect();
        NtpDistribution::new(tempered).expect("tempered row has positive mass")
    }
}

impl NtpSource for MarkovSource {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_ntp(&self, history: &[TokenId]) -> Result<NtpDistribution, LmError> {
        let ctx = &history[history.len().saturating_sub(self.order)..];
        if let Some(row) = self.rows.lock().get(ctx) {
            return Ok((**row).clone());
        }
        let row = Arc::new(self.synthesize_row(ctx));
        self.rows.lock().put(ctx.to_vec(), Arc::clone(&row));
        Ok((*row).clone())
    }
}

#[derive(Serialize, Deserialize)]
struct TraceHeader {
    vocab_size: usize,
    n_steps: usize,
}

#[derive(Deserialize)]
struct TraceLine {
    t: usize,
    probs: Vec<f64>,
    #[serde(default)]
    token: Option<TokenId>,
}

/// Recorded next-token distributions, one per generation step.
#[derive(Debug, Clone, PartialEq)]
pub struct NtpTrace {
    pub vocab_size: usize,
    pub steps: Vec<NtpDistribution>,
    pub tokens_taken: Vec<Option<TokenId>>,
}

impl NtpTrace {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size, steps: Vec::new(), tokens_taken: Vec::new() }
    }

    pub fn push(&mut self, step: NtpDistribution, token: Option<TokenId>) {
        assert_eq!(step.len(), self.vocab_size, "step vocabulary mismatch");
        self.steps.push(step);
        self.tokens_taken.push(token);
    }

    pub fn replay_next(&self, t: usize) -> Result<NtpDistribution, LmError> {
        self.steps.get(t).cloned().ok_or(LmError::EndOfTrace(t))
    }

    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), LmError> {
        let header = TraceHeader { vocab_size: self.vocab_size, n_steps: self.steps.len() };
        writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
        for (t, (step, token)) in self.steps.iter().zip(&self.tokens_taken).enumerate() {
            // 17 significant digits: every f64 survives the round trip.
            let probs: Vec<String> = step.probs().iter().map(|p| format!("{p:.16e}")).collect();
            write!(out, "{{\"t\":{t},\"probs\":[{}]", probs.join(","))?;
            if let Some(tok) = token {
                write!(out, ",\"token\":{}", tok.0)?;
            }
            writeln!(out, "}}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Self, LmError> {
        let malformed = |line: usize, reason: String| LmError::MalformedTrace { line, reason };
        let mut lines = reader.lines();
        let first = lines.next().ok_or_else(|| malformed(1, "missing header".into()))??;
        let header: TraceHeader =
            serde_json::from_str(&first).map_err(|e| malformed(1, e.to_string()))?;
        let mut trace = NtpTrace::new(header.vocab_size);
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceLine = serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
            if rec.t != trace.steps.len() {
                return Err(malformed(line_no, format!("expected t = {}, got {}", trace.steps.len(), rec.t)));
            }
            if rec.probs.len() != header.vocab_size {
                return Err(malformed(
                    line_no,
                    format!("row has {} entries, vocab is {}", rec.probs.len(), header.vocab_size),
                ));
            }
            if let Some(tok) = rec.token {
                if tok.index() >= header.vocab_size {
                    return Err(malformed(line_no, format!("token {} outside vocabulary", tok.0)));
                }
            }
            let step = NtpDistribution::from_raw(rec.probs, true).map_err(|e| malformed(line_no, e.to_string()))?;
            trace.steps.push(step);
            trace.tokens_taken.push(rec.token);
        }
        if trace.steps.len() != header.n_steps {
            return Err(malformed(
                1,
                format!("header declares {} steps, found {}", header.n_steps, trace.steps.len()),
            ));
        }
        Ok(trace)
    }
}

/// Replays a trace as a model: the step index is the number of tokens past
/// `start` in the history.
#[derive(Debug, Clone)]
pub struct TraceSource {
    trace: NtpTrace,
    start: usize,
}

impl TraceSource {
    pub fn new(trace: NtpTrace, start: usize) -> Self {
        Self { trace, start }
    }
}

impl NtpSource for TraceSource {
    fn vocab_size(&self) -> usize {
        self.trace.vocab_size
    }

    fn next_ntp(&self, history: &[TokenId]) -> Result<NtpDistribution, LmError> {
        let t = history.len().checked_sub(self.start).ok_or(LmError::EndOfTrace(0))?;
        self.trace.replay_next(t)
    }
}
