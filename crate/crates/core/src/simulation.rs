//! Sparse-mixture power experiments.
//!
//! A fraction `ε_m = m^{-p}` of the `m` pivots carry signal, the rest are
//! null `U[0,1]`. In the strong regime each signal draw first picks a green
//! mass `P_G ~ U[m^{-r}, 1]` and then `ζ ~ U[0, P_G]`; in the weak regime
//! `ζ ~ U[0, 1 - m^{-q}]`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{
    empirical_critical, null_statistics, rejects, sort_unit_values, CalibrationCache, NullCalibration,
    Statistic, MIN_CALIBRATION_REPS,
};
use crate::rng::{RngStream, UniformSource};
use crate::stats::{mean, skewness};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Detect(#[from] crate::detection::DetectError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "lowercase")]
pub enum Regime {
    /// Green mass bounded below by `m^{-r}`.
    Strong { r: f64 },
    /// Green mass fixed at `1 - m^{-q}`.
    Weak { q: f64 },
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Strong { .. } => "strong",
            Regime::Weak { .. } => "weak",
        }
    }

    pub fn param(&self) -> f64 {
        match *self {
            Regime::Strong { r } => r,
            Regime::Weak { q } => q,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub regime: Regime,
    pub p: f64,
    pub m_grid: Vec<usize>,
    pub reps: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl RegimeConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |s: String| Err(SimError::InvalidConfig(s));
        if !(self.p > 0.0 && self.p < 1.0) {
            return bad(format!("p must lie in (0, 1), got {}", self.p));
        }
        let param = self.regime.param();
        if !(param > 0.0 && param.is_finite()) {
            return bad(format!("{} regime parameter must be positive, got {param}", self.regime.name()));
        }
        if self.m_grid.is_empty() {
            return bad("m grid is empty".into());
        }
        if self.m_grid.windows(2).any(|w| w[0] >= w[1]) || self.m_grid[0] < 2 {
            return bad("m grid must be strictly ascending with m >= 2".into());
        }
        if self.reps < MIN_CALIBRATION_REPS {
            return bad(format!("reps must be >= {MIN_CALIBRATION_REPS}, got {}", self.reps));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        Ok(())
    }
}

/// Stream role for alternative replicates (nulls use role 0).
pub const ROLE_ALT: u64 = 1;

/// Number of signal entries, `m · m^{-p}` rounded to nearest.
pub fn signal_count(m: usize, p: f64) -> usize {
    ((m as f64).powf(1.0 - p)).round().min(m as f64) as usize
}

/// One alternative sample of `m` pivots, positions shuffled.
pub fn sample_alternative(regime: Regime, p: f64, m: usize, rng: &mut RngStream) -> Vec<f64> {
    let mut x = sample_alternative_unshuffled(regime, p, m, rng);
    rng.shuffle(&mut x);
    x
}

fn sample_alternative_unshuffled(regime: Regime, p: f64, m: usize, rng: &mut RngStream) -> Vec<f64> {
    let mf = m as f64;
    let n_signal = signal_count(m, p);
    let mut x = Vec::with_capacity(m);
    match regime {
        Regime::Strong { r } => {
            let lo = mf.powf(-r);
            for _ in 0..n_signal {
                let green_mass = lo + (1.0 - lo) * rng.next_uniform();
                x.push(green_mass * rng.next_uniform());
            }
        }
        Regime::Weak { q } => {
            let hi = 1.0 - mf.powf(-q);
            for _ in 0..n_signal {
                x.push(hi * rng.next_uniform());
            }
        }
    }
    for _ in n_signal..m {
        x.push(rng.next_uniform());
    }
    x
}

fn alt_stream(seed: u64, m: usize, rep: usize) -> RngStream {
    RngStream::derive(seed, &[m as u64, ROLE_ALT, rep as u64])
}

/// Each statistic on `reps` alternative samples, indexed `[stat][rep]`.
pub fn alternative_statistics(
    stats: &[Statistic],
    regime: Regime,
    p: f64,
    m: usize,
    reps: usize,
    seed: u64,
) -> Vec<Vec<f64>> {
    let per_rep: Vec<Vec<f64>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut x = sample_alternative(regime, p, m, &mut alt_stream(seed, m, rep));
            sort_unit_values(&mut x);
            stats.iter().map(|s| s.compute_sorted(&x)).collect()
        })
        .collect();
    (0..stats.len()).map(|i| per_rep.iter().map(|r| r[i]).collect()).collect()
}

/// One row of a power curve; the CSV schema of `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub regime: String,
    pub p: f64,
    pub q_or_r: f64,
    pub m: usize,
    pub statistic: Statistic,
    pub reps: usize,
    pub alpha: f64,
    pub critical_value: f64,
    pub power: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PowerCurve {
    pub rows: Vec<PowerRow>,
}

impl PowerCurve {
    pub fn power(&self, stat: Statistic, m: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.statistic == stat && r.m == m).map(|r| r.power)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const POWER_STATISTICS: [Statistic; 2] = [Statistic::Sum, Statistic::HcPlus];

/// Null critical values for `stats` at size `n`, reusing and filling `cache`.
pub fn null_criticals(
    stats: &[Statistic],
    n: usize,
    alpha: f64,
    reps: usize,
    seed: u64,
    cache: Option<&CalibrationCache>,
) -> Result<Vec<f64>, SimError> {
    let mut out: Vec<Option<f64>> = vec![None; stats.len()];
    if let Some(cache) = cache {
        for (slot, &stat) in out.iter_mut().zip(stats) {
            *slot = cache.lookup(stat, n, alpha, reps, seed).map(|c| c.critical_value);
        }
    }
    let missing: Vec<Statistic> =
        stats.iter().zip(&out).filter(|(_, c)| c.is_none()).map(|(&s, _)| s).collect();
    if !missing.is_empty() {
        let values = null_statistics(&missing, n, reps, seed);
        for (stat, vals) in missing.iter().zip(&values) {
            let critical_value = empirical_critical(vals, alpha, stat.tail());
            if let Some(cache) = cache {
                cache.insert(NullCalibration { statistic: *stat, n, alpha, reps, seed, critical_value })?;
            }
            let idx = stats.iter().position(|s| s == stat).expect("missing stat comes from stats");
            out[idx] = Some(critical_value);
        }
    }
    Ok(out.into_iter().map(|c| c.expect("filled above")).collect())
}

/// Rejection rates of `stats` over the m grid, each against its calibrated
/// null critical value.
pub fn run_power_with(
    config: &RegimeConfig,
    stats: &[Statistic],
    cache: Option<&CalibrationCache>,
) -> Result<PowerCurve, SimError> {
    config.validate()?;
    let mut rows = Vec::with_capacity(config.m_grid.len() * stats.len());
    for &m in &config.m_grid {
        let criticals = null_criticals(stats, m, config.alpha, config.reps, config.seed, cache)?;
        let alt = alternative_statistics(stats, config.regime, config.p, m, config.reps, config.seed);
        for ((&stat, &c), values) in stats.iter().zip(&criticals).zip(&alt) {
            let hits = values.iter().filter(|&&v| rejects(v, c, stat.tail())).count();
            rows.push(PowerRow {
                regime: config.regime.name().into(),
                p: config.p,
                q_or_r: config.regime.param(),
                m,
                statistic: stat,
                reps: config.reps,
                alpha: config.alpha,
                critical_value: c,
                power: hits as f64 / config.reps as f64,
                seed: config.seed,
            });
        }
    }
    Ok(PowerCurve { rows })
}

/// Sum and HC⁺ power curves.
pub fn run_power(config: &RegimeConfig) -> Result<PowerCurve, SimError> {
    run_power_with(config, &POWER_STATISTICS, None)
}

/// Position of a weak-regime `(p, q)` cell relative to the detection
/// boundaries `p + q = 1/2` (sum test) and `2p + q = 1` (higher criticism).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    SumDetectable,
    SumBoundary,
    HcOnly,
    HcBoundary,
    Undetectable,
}

const BOUNDARY_TOL: f64 = 1e-9;

pub fn classify(p: f64, q: f64) -> Region {
    let sum_line = p + q - 0.5;
    let hc_line = 2.0 * p + q - 1.0;
    if hc_line.abs() < BOUNDARY_TOL {
        Region::HcBoundary
    } else if hc_line > 0.0 {
        Region::Undetectable
    } else if sum_line.abs() < BOUNDARY_TOL {
        Region::SumBoundary
    } else if sum_line < 0.0 {
        Region::SumDetectable
    } else {
        Region::HcOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCell {
    pub p: f64,
    pub q: f64,
    pub region: Region,
    pub statistic: Statistic,
    pub power: f64,
}

/// Weak-regime power at fixed `m` over a `(p, q)` grid.
pub fn boundary_scan(
    p_list: &[f64],
    q_list: &[f64],
    m: usize,
    reps: usize,
    alpha: f64,
    seed: u64,
    cache: Option<&CalibrationCache>,
) -> Result<Vec<BoundaryCell>, SimError> {
    let mut cells = Vec::new();
    for &p in p_list {
        for &q in q_list {
            let config = RegimeConfig { regime: Regime::Weak { q }, p, m_grid: vec![m], reps, alpha, seed };
            let curve = run_power_with(&config, &POWER_STATISTICS, cache)?;
            for row in curve.rows {
                cells.push(BoundaryCell { p, q, region: classify(p, q), statistic: row.statistic, power: row.power });
            }
        }
    }
    Ok(cells)
}

/// Binned statistic values under the null and, optionally, an alternative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub statistic: Statistic,
    pub m: usize,
    pub edges: Vec<f64>,
    pub null_counts: Vec<u64>,
    pub alt_counts: Option<Vec<u64>>,
    pub null_mean: f64,
    pub null_skewness: f64,
}

impl Histogram {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["statistic", "m", "bin_lo", "bin_hi", "null_count", "alt_count"])?;
        for i in 0..self.null_counts.len() {
            let alt = self.alt_counts.as_ref().map(|a| a[i].to_string()).unwrap_or_default();
            w.write_record([
                self.statistic.as_str().to_string(),
                self.m.to_string(),
                self.edges[i].to_string(),
                self.edges[i + 1].to_string(),
                self.null_counts[i].to_string(),
                alt,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn bin_counts(values: &[f64], edges: &[f64]) -> Vec<u64> {
    let bins = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[bins]);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let idx = if !(v > lo) || width <= 0.0 {
            0
        } else {
            (((v - lo) / width) as usize).min(bins - 1)
        };
        counts[idx] += 1;
    }
    counts
}

pub fn null_histogram(
    stat: Statistic,
    m: usize,
    reps: usize,
    bins: usize,
    seed: u64,
    alternative: Option<(Regime, f64)>,
) -> Result<Histogram, SimError> {
    if bins == 0 {
        return Err(SimError::InvalidConfig("bins must be positive".into()));
    }
    if reps == 0 {
        return Err(SimError::InvalidConfig("reps must be positive".into()));
    }
    let null = null_statistics(&[stat], m, reps, seed).remove(0);
    let alt = alternative.map(|(regime, p)| alternative_statistics(&[stat], regime, p, m, reps, seed).remove(0));
    let finite = null.iter().chain(alt.iter().flatten()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let edges: Vec<f64> = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
    let finite_null: Vec<f64> = null.iter().copied().filter(|v| v.is_finite()).collect();
    Ok(Histogram {
        statistic: stat,
        m,
        null_counts: bin_counts(&null, &edges),
        alt_counts: alt.as_ref().map(|a| bin_counts(a, &edges)),
        null_mean: mean(&finite_null),
        null_skewness: skewness(&finite_null),
        edges,
    })
}
