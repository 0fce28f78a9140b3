//! Score extraction and watermark hypothesis tests.
//!
//! Each scored step contributes a pivot `ζ′` that is `U[0,1]` under the null
//! and stochastically small under the watermark (`ζ` for green tokens,
//! `1 − ζ` for red ones). The tests here all look for that downward shift.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use parking_lot::RwLock;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoders::{scheme_green_list, Scheme};
use crate::keying::{KeyError, WatermarkKey};
use crate::rng::{RngStream, UniformSource};
use crate::stats::{binomial_upper_tail, gamma_upper_tail, normal_cdf};
use crate::types::TokenId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DetectError {
    #[error("no scores to test")]
    EmptyScores,
    #[error("statistic needs at least {needed} scores, got {got}")]
    TooFewScores { needed: usize, got: usize },
    #[error("argument out of range: {0}")]
    OutOfRange(String),
    #[error("scheme {0} has no detector here")]
    UnsupportedScheme(Scheme),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error("calibration cache: {0}")]
    Cache(String),
}

/// One detection observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredToken {
    /// Index of the token within the received text.
    pub position: usize,
    pub token: TokenId,
    pub context: Vec<TokenId>,
    pub is_green: bool,
    pub zeta: f64,
    pub zeta_prime: f64,
}

/// Scores every position with a full context, keeping the first occurrence
/// of each `(context, token)` tuple. Texts of length `<= k` give no scores.
pub fn extract_scores(
    text: &[TokenId],
    key: &WatermarkKey,
    vocab_size: usize,
) -> Result<Vec<ScoredToken>, DetectError> {
    extract_scores_for(text, key, vocab_size, Scheme::Mc)
}

/// As [`extract_scores`], using the green list of `scheme`.
pub fn extract_scores_for(
    text: &[TokenId],
    key: &WatermarkKey,
    vocab_size: usize,
    scheme: Scheme,
) -> Result<Vec<ScoredToken>, DetectError> {
    let k = key.k;
    let mut seen: HashSet<&[TokenId]> = HashSet::new();
    let mut out = Vec::with_capacity(text.len().saturating_sub(k));
    for t in k..text.len() {
        if !seen.insert(&text[t - k..=t]) {
            continue;
        }
        let ctx = &text[t - k..t];
        let token = text[t];
        let zeta = key.derive_zeta(ctx)?.value();
        let is_green = scheme_green_list(scheme, key, ctx, vocab_size)?.contains(token);
        out.push(ScoredToken {
            position: t,
            token,
            context: ctx.to_vec(),
            is_green,
            zeta,
            zeta_prime: if is_green { zeta } else { 1.0 - zeta },
        });
    }
    Ok(out)
}

/// Which scores feed a test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Green tokens only, scored by `ζ`.
    GreenOnly,
    /// Every token, scored by `ζ′`.
    Combined,
}

impl FromStr for Side {
    type Err = DetectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "green" | "green_only" => Ok(Side::GreenOnly),
            "combined" => Ok(Side::Combined),
            other => Err(DetectError::OutOfRange(format!("unknown side `{other}`"))),
        }
    }
}

pub fn select_values(scores: &[ScoredToken], side: Side) -> Vec<f64> {
    match side {
        Side::Combined => scores.iter().map(|s| s.zeta_prime).collect(),
        Side::GreenOnly => scores.iter().filter(|s| s.is_green).map(|s| s.zeta).collect(),
    }
}

const IRWIN_HALL_EXACT_MAX_N: usize = 14;

/// CDF of the sum of `n` independent `U[0,1]` variables, `1 <= n <= 14`.
pub fn irwin_hall_cdf(s: f64, n: usize) -> Result<f64, DetectError> {
    if n == 0 || n > IRWIN_HALL_EXACT_MAX_N {
        return Err(DetectError::OutOfRange(format!("exact Irwin-Hall needs 1 <= n <= 14, got {n}")));
    }
    if !(0.0..=n as f64).contains(&s) {
        return Err(DetectError::OutOfRange(format!("s = {s} outside [0, {n}]")));
    }
    // The alternating sum cancels badly in the upper half; reflect into the lower one.
    if s > n as f64 / 2.0 {
        return Ok(1.0 - irwin_hall_lower_half(n as f64 - s, n));
    }
    Ok(irwin_hall_lower_half(s, n))
}

fn irwin_hall_lower_half(s: f64, n: usize) -> f64 {
    let mut total = 0.0;
    let mut binom = 1.0;
    for j in 0..=(s.floor() as usize).min(n) {
        if j > 0 {
            binom *= (n - j + 1) as f64 / j as f64;
        }
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * binom * (s - j as f64).powi(n as i32);
    }
    let factorial: f64 = (1..=n).map(|i| i as f64).product();
    (total / factorial).clamp(0.0, 1.0)
}

/// Lower-tail p-value of the sum of `n` null pivots.
pub fn sum_p_value(s: f64, n: usize) -> f64 {
    if n <= IRWIN_HALL_EXACT_MAX_N {
        irwin_hall_cdf(s.clamp(0.0, n as f64), n).expect("range checked")
    } else {
        let n = n as f64;
        normal_cdf((s - n / 2.0) / (n / 12.0).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Statistic {
    #[serde(rename = "sum")]
    Sum,
    #[serde(rename = "hc+")]
    HcPlus,
    #[serde(rename = "hc*")]
    HcStar,
    #[serde(rename = "max")]
    Max,
}

/// Which tail of the null distribution signals a watermark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tail {
    Lower,
    Upper,
}

impl Statistic {
    pub const ALL: [Statistic; 4] = [Statistic::Sum, Statistic::HcPlus, Statistic::HcStar, Statistic::Max];

    pub fn as_str(self) -> &'static str {
        match self {
            Statistic::Sum => "sum",
            Statistic::HcPlus => "hc+",
            Statistic::HcStar => "hc*",
            Statistic::Max => "max",
        }
    }

    pub fn tail(self) -> Tail {
        match self {
            Statistic::Sum | Statistic::Max => Tail::Lower,
            Statistic::HcPlus | Statistic::HcStar => Tail::Upper,
        }
    }

    pub fn min_scores(self) -> usize {
        match self {
            Statistic::HcPlus | Statistic::HcStar => 2,
            _ => 1,
        }
    }

    /// Value on unsorted pivots (sorts a copy when needed).
    pub fn compute(self, values: &[f64]) -> Result<f64, DetectError> {
        check_len(values.len(), self.min_scores())?;
        Ok(match self {
            Statistic::Sum => values.iter().sum(),
            Statistic::Max => values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            Statistic::HcPlus | Statistic::HcStar => {
                let mut sorted = values.to_vec();
                sort_unit_values(&mut sorted);
                self.compute_sorted(&sorted)
            }
        })
    }

    /// Value on pivots already sorted ascending.
    pub fn compute_sorted(self, sorted: &[f64]) -> f64 {
        match self {
            Statistic::Sum => sorted.iter().sum(),
            Statistic::Max => sorted.last().copied().unwrap_or(f64::NEG_INFINITY),
            Statistic::HcPlus => hc_sorted(sorted, HcVariant::Plus, HcDenominator::Sqrt),
            Statistic::HcStar => hc_sorted(sorted, HcVariant::Star, HcDenominator::Sqrt),
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Statistic {
    type Err = DetectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Statistic::Sum),
            "hc+" | "hc_plus" | "hcplus" => Ok(Statistic::HcPlus),
            "hc*" | "hc_star" | "hcstar" => Ok(Statistic::HcStar),
            "max" => Ok(Statistic::Max),
            other => Err(DetectError::OutOfRange(format!("unknown statistic `{other}`"))),
        }
    }
}

fn check_len(got: usize, needed: usize) -> Result<(), DetectError> {
    if got == 0 {
        Err(DetectError::EmptyScores)
    } else if got < needed {
        Err(DetectError::TooFewScores { needed, got })
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HcVariant {
    /// Maximum over every order statistic.
    Star,
    /// Maximum over order statistics `>= 1/n`.
    Plus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HcDenominator {
    /// `sqrt(x(1-x))`, the standardized empirical process.
    Sqrt,
    /// `x(1-x)`.
    Linear,
}

/// Sorts values in `[0, 1]` ascending. Bucket sort: linear expected time for
/// roughly uniform inputs, which is what the simulations feed it.
pub fn sort_unit_values(values: &mut [f64]) {
    let n = values.len();
    if n < 64 {
        values.sort_unstable_by(f64::total_cmp);
        return;
    }
    let bucket_of = |x: f64| ((x.clamp(0.0, 1.0) * n as f64) as usize).min(n - 1);
    let mut starts = vec![0usize; n + 1];
    for &x in values.iter() {
        starts[bucket_of(x) + 1] += 1;
    }
    for i in 0..n {
        starts[i + 1] += starts[i];
    }
    let mut fill = starts.clone();
    let mut out = vec![0.0; n];
    for &x in values.iter() {
        let b = bucket_of(x);
        out[fill[b]] = x;
        fill[b] += 1;
    }
    for b in 0..n {
        let bucket = &mut out[starts[b]..starts[b + 1]];
        if bucket.len() > 1 {
            bucket.sort_unstable_by(f64::total_cmp);
        }
    }
    values.copy_from_slice(&out);
}

/// Individual `HC_{n,t}` terms for sorted pivots; `None` where the term is
/// excluded (outside the variant's range or zero denominator).
pub fn hc_terms(sorted: &[f64], variant: HcVariant, denom: HcDenominator) -> Vec<Option<f64>> {
    let n = sorted.len() as f64;
    let root_n = n.sqrt();
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if variant == HcVariant::Plus && x < 1.0 / n {
                return None;
            }
            let v = x * (1.0 - x);
            if v <= 0.0 {
                return None;
            }
            let d = match denom {
                HcDenominator::Sqrt => v.sqrt(),
                HcDenominator::Linear => v,
            };
            Some(root_n * ((i + 1) as f64 / n - x) / d)
        })
        .collect()
}

fn hc_sorted(sorted: &[f64], variant: HcVariant, denom: HcDenominator) -> f64 {
    let n = sorted.len() as f64;
    let root_n = n.sqrt();
    let lower = if variant == HcVariant::Plus { 1.0 / n } else { 0.0 };
    let mut best = f64::NEG_INFINITY;
    for (i, &x) in sorted.iter().enumerate() {
        if x < lower {
            continue;
        }
        let v = x * (1.0 - x);
        if v <= 0.0 {
            continue;
        }
        let d = match denom {
            HcDenominator::Sqrt => v.sqrt(),
            HcDenominator::Linear => v,
        };
        let term = root_n * ((i + 1) as f64 / n - x) / d;
        if term > best {
            best = term;
        }
    }
    best
}

/// Higher-criticism statistic. Returns `-inf` when no term is eligible.
pub fn hc_statistic(values: &[f64], variant: HcVariant, denom: HcDenominator) -> Result<f64, DetectError> {
    check_len(values.len(), 2)?;
    let mut sorted = values.to_vec();
    sort_unit_values(&mut sorted);
    Ok(hc_sorted(&sorted, variant, denom))
}

/// Outcome of one test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub statistic: String,
    /// Non-finite values (HC⁺ with no eligible term) serialize as `null`.
    pub value: f64,
    pub p_value: Option<f64>,
    pub threshold: Option<f64>,
    pub n_scored: usize,
    pub reject: bool,
    pub alpha: f64,
}

pub fn sum_test(values: &[f64], alpha: f64) -> Result<DetectionReport, DetectError> {
    check_len(values.len(), 1)?;
    let s: f64 = values.iter().sum();
    let p = sum_p_value(s, values.len());
    Ok(DetectionReport {
        statistic: Statistic::Sum.as_str().into(),
        value: s,
        p_value: Some(p),
        threshold: None,
        n_scored: values.len(),
        reject: p < alpha,
        alpha,
    })
}

/// Rejects iff `max ζ <= α^{1/n}`; exact size `α` under the null.
pub fn max_test(values: &[f64], alpha: f64) -> Result<DetectionReport, DetectError> {
    check_len(values.len(), 1)?;
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let c = alpha.powf(1.0 / values.len() as f64);
    Ok(DetectionReport {
        statistic: Statistic::Max.as_str().into(),
        value: m,
        p_value: None,
        threshold: Some(c),
        n_scored: values.len(),
        reject: m <= c,
        alpha,
    })
}

/// HC test against a calibrated critical value (reject when strictly above).
pub fn hc_test(
    values: &[f64],
    stat: Statistic,
    alpha: f64,
    critical_value: f64,
) -> Result<DetectionReport, DetectError> {
    let value = stat.compute(values)?;
    Ok(DetectionReport {
        statistic: stat.as_str().into(),
        value,
        p_value: None,
        threshold: Some(critical_value),
        n_scored: values.len(),
        reject: value > critical_value,
        alpha,
    })
}

/// Runs `stat` on raw pivots; HC variants take their threshold from `cache`.
pub fn run_test(
    values: &[f64],
    stat: Statistic,
    alpha: f64,
    cache: &CalibrationCache,
) -> Result<DetectionReport, DetectError> {
    match stat {
        Statistic::Sum => sum_test(values, alpha),
        Statistic::Max => max_test(values, alpha),
        Statistic::HcPlus | Statistic::HcStar => {
            check_len(values.len(), 2)?;
            let c = cache.critical_value(stat, values.len(), alpha)?;
            hc_test(values, stat, alpha, c)
        }
    }
}

/// Scores `text` with `key` and runs `stat`. The max test always uses the
/// green-token `ζ` values.
pub fn detect(
    text: &[TokenId],
    key: &WatermarkKey,
    vocab_size: usize,
    stat: Statistic,
    alpha: f64,
    side: Side,
    cache: &CalibrationCache,
) -> Result<DetectionReport, DetectError> {
    let scores = extract_scores(text, key, vocab_size)?;
    let side = if stat == Statistic::Max { Side::GreenOnly } else { side };
    run_test(&select_values(&scores, side), stat, alpha, cache)
}

/// Detectors for the baseline schemes: the exponential score for Gumbel-max
/// and an exact binomial green count for soft and DiPmark.
pub fn detect_baseline(
    text: &[TokenId],
    key: &WatermarkKey,
    vocab_size: usize,
    scheme: Scheme,
    alpha: f64,
) -> Result<DetectionReport, DetectError> {
    match scheme {
        Scheme::Gumbel => {
            let k = key.k;
            let mut seen = HashSet::new();
            let mut total = 0.0;
            let mut n = 0usize;
            for t in k..text.len() {
                if !seen.insert(&text[t - k..=t]) {
                    continue;
                }
                let seed = key.zeta_stream(&text[t - k..t])?.state();
                let u = RngStream::at(seed, text[t].0 as u64).next_uniform();
                total += -(1.0 - u).ln();
                n += 1;
            }
            check_len(n, 1)?;
            let p = gamma_upper_tail(n as f64, total);
            Ok(DetectionReport {
                statistic: "gumbel".into(),
                value: total,
                p_value: Some(p),
                threshold: None,
                n_scored: n,
                reject: p < alpha,
                alpha,
            })
        }
        Scheme::Soft | Scheme::Dipmark => {
            let scores = extract_scores_for(text, key, vocab_size, scheme)?;
            check_len(scores.len(), 1)?;
            let green = scores.iter().filter(|s| s.is_green).count();
            let gamma = match scheme {
                Scheme::Dipmark => (key.gamma() * vocab_size as f64).floor() / vocab_size as f64,
                _ => key.green_fraction(vocab_size),
            };
            let p = binomial_upper_tail(scores.len() as u64, gamma, green as u64);
            Ok(DetectionReport {
                statistic: "green_count".into(),
                value: green as f64,
                p_value: Some(p),
                threshold: None,
                n_scored: scores.len(),
                reject: p < alpha,
                alpha,
            })
        }
        other => Err(DetectError::UnsupportedScheme(other)),
    }
}

/// Stream role for null replicates; alternatives use other roles.
pub const ROLE_NULL: u64 = 0;

/// Pivot sample for null replicate `rep`. Depends only on `(seed, n, rep)`.
pub fn null_sample(seed: u64, n: usize, rep: usize) -> Vec<f64> {
    let mut rng = RngStream::derive(seed, &[n as u64, ROLE_NULL, rep as u64]);
    (0..n).map(|_| rng.next_uniform()).collect()
}

/// Each statistic in `stats` evaluated on `reps` null samples of size `n`.
/// Results are indexed `[stat][rep]` and independent of thread scheduling.
pub fn null_statistics(stats: &[Statistic], n: usize, reps: usize, seed: u64) -> Vec<Vec<f64>> {
    let per_rep: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut x = null_sample(seed, n, rep);
            sort_unit_values(&mut x);
            stats.iter().map(|s| s.compute_sorted(&x)).collect()
        })
        .collect();
    (0..stats.len()).map(|i| per_rep.iter().map(|r| r[i]).collect()).collect()
}

/// Empirical critical value at level `alpha` in the given tail. Upper tail:
/// reject when a value is strictly above it; lower tail: strictly below.
pub fn empirical_critical(values: &[f64], alpha: f64, tail: Tail) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let r = v.len() as f64;
    let idx = match tail {
        Tail::Upper => ((1.0 - alpha) * r).ceil() as isize - 1,
        Tail::Lower => (alpha * r).floor() as isize,
    };
    v[idx.clamp(0, v.len() as isize - 1) as usize]
}

pub fn rejects(value: f64, critical: f64, tail: Tail) -> bool {
    match tail {
        Tail::Upper => value > critical,
        Tail::Lower => value < critical,
    }
}

pub const DEFAULT_CALIBRATION_REPS: usize = 2000;
pub const MIN_CALIBRATION_REPS: usize = 1000;

/// Simulated critical value of a statistic under the null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullCalibration {
    pub statistic: Statistic,
    pub n: usize,
    pub alpha: f64,
    pub reps: usize,
    pub seed: u64,
    pub critical_value: f64,
}

pub fn calibrate_null(
    stat: Statistic,
    n: usize,
    alpha: f64,
    reps: usize,
    seed: u64,
) -> Result<NullCalibration, DetectError> {
    if reps < MIN_CALIBRATION_REPS {
        return Err(DetectError::OutOfRange(format!("reps must be >= {MIN_CALIBRATION_REPS}, got {reps}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(DetectError::OutOfRange(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    check_len(n, stat.min_scores())?;
    let values = &null_statistics(&[stat], n, reps, seed)[0];
    Ok(NullCalibration {
        statistic: stat,
        n,
        alpha,
        reps,
        seed,
        critical_value: empirical_critical(values, alpha, stat.tail()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct CalibKey {
    stat: Statistic,
    n: usize,
    alpha_bits: u64,
    reps: usize,
    seed: u64,
}

/// Memoized null calibrations, optionally persisted as CSV. Readers share a
/// lock; a miss computes outside the lock and then takes the writer side.
#[derive(Debug)]
pub struct CalibrationCache {
    reps: usize,
    seed: u64,
    path: Option<PathBuf>,
    entries: RwLock<HashMap<CalibKey, NullCalibration>>,
}

pub const CALIBRATION_FILE: &str = "calibration.csv";

impl CalibrationCache {
    pub fn in_memory(reps: usize, seed: u64) -> Self {
        Self { reps, seed, path: None, entries: RwLock::new(HashMap::new()) }
    }

    /// Cache backed by `path`; existing records are loaded.
    pub fn open(path: &Path, reps: usize, seed: u64) -> Result<Self, DetectError> {
        let cache = Self { path: Some(path.to_path_buf()), ..Self::in_memory(reps, seed) };
        if path.exists() {
            let mut reader = csv::Reader::from_path(path).map_err(|e| DetectError::Cache(e.to_string()))?;
            let mut entries = cache.entries.write();
            for rec in reader.deserialize::<NullCalibration>() {
                let rec = rec.map_err(|e| DetectError::Cache(e.to_string()))?;
                entries.insert(Self::key_of(&rec), rec);
            }
        }
        Ok(cache)
    }

    fn key_of(c: &NullCalibration) -> CalibKey {
        CalibKey { stat: c.statistic, n: c.n, alpha_bits: c.alpha.to_bits(), reps: c.reps, seed: c.seed }
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.read().is_empty()
    }

    pub fn lookup(
        &self,
        stat: Statistic,
        n: usize,
        alpha: f64,
        reps: usize,
        seed: u64,
    ) -> Option<NullCalibration> {
        let key = CalibKey { stat, n, alpha_bits: alpha.to_bits(), reps, seed };
        self.entries.read().get(&key).cloned()
    }

    pub fn critical_value(&self, stat: Statistic, n: usize, alpha: f64) -> Result<f64, DetectError> {
        Ok(self.get_or_calibrate(stat, n, alpha, self.reps, self.seed)?.critical_value)
    }

    pub fn get_or_calibrate(
        &self,
        stat: Statistic,
        n: usize,
        alpha: f64,
        reps: usize,
        seed: u64,
    ) -> Result<NullCalibration, DetectError> {
        let key = CalibKey { stat, n, alpha_bits: alpha.to_bits(), reps, seed };
        if let Some(c) = self.entries.read().get(&key) {
            return Ok(c.clone());
        }
        let calib = calibrate_null(stat, n, alpha, reps, seed)?;
        self.insert(calib.clone())?;
        Ok(calib)
    }

    pub fn insert(&self, calib: NullCalibration) -> Result<(), DetectError> {
        let mut entries = self.entries.write();
        entries.insert(Self::key_of(&calib), calib);
        if let Some(path) = &self.path {
            Self::persist(path, &entries)?;
        }
        Ok(())
    }

    fn persist(path: &Path, entries: &HashMap<CalibKey, NullCalibration>) -> Result<(), DetectError> {
        let err = |e: &dyn fmt::Display| DetectError::Cache(e.to_string());
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| err(&e))?;
        }
        let mut rows: Vec<&NullCalibration> = entries.values().collect();
        rows.sort_by(|a, b| {
            (a.statistic.as_str(), a.n, a.reps, a.seed)
                .cmp(&(b.statistic.as_str(), b.n, b.reps, b.seed))
                .then(a.alpha.total_cmp(&b.alpha))
        });
        let tmp = path.with_extension("csv.tmp");
        let mut writer = csv::Writer::from_path(&tmp).map_err(|e| err(&e))?;
        for row in rows {
            writer.serialize(row).map_err(|e| err(&e))?;
        }
        writer.flush().map_err(|e| err(&e))?;
        drop(writer);
        fs::rename(&tmp, path).map_err(|e| err(&e))
    }
}
