use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wmkit::attacks::{specdec_postprocess, substitute, SpecDecConfig, SpecDecStats};
use wmkit::decoders::{generate as run_generation, DecoderConfig, Scheme};
use wmkit::detection::{
    detect_baseline, extract_scores, run_test, select_values, CalibrationCache, DetectError, Side, Statistic,
    CALIBRATION_FILE, MIN_CALIBRATION_REPS,
};
use wmkit::rng::fold_words;
use wmkit::simulation::{
    boundary_scan, null_histogram, run_power_with, Regime, RegimeConfig, SimError, POWER_STATISTICS,
};
use wmkit::{GeneratedText, RngStream, TokenId, WatermarkKey};

use crate::error::{runtime, usage, CliError, CliResult};
use crate::model::ModelSpec;
use crate::records::{
    open_output, read_jsonl, write_jsonl, DetectRecord, Diagnostics, TextRecord, LABEL_PLAIN, LABEL_WATERMARKED,
};
use crate::{AttackArgs, CalibrateArgs, DetectArgs, GenerateArgs, ScanArgs, SimulateArgs, SpecdecArgs};

// Stream roles under the user seed.
const ROLE_PROMPT: u64 = 1;
const ROLE_AUX: u64 = 2;
const ROLE_ATTACK: u64 = 3;
const ROLE_SPECDEC: u64 = 4;

pub const CALIB_DIR_ENV: &str = "WMKIT_CALIB_DIR";

fn parse_key(s: &str) -> CliResult<WatermarkKey> {
    s.parse().map_err(|e| usage(format!("key: {e}")))
}

fn random_prompt(seed: u64, id: usize, len: usize, vocab: usize) -> GeneratedText {
    let mut rng = RngStream::derive(seed, &[ROLE_PROMPT, id as u64]);
    let prompt = (0..len).map(|_| TokenId(rng.next_below(vocab as u64) as u32)).collect();
    GeneratedText::from_prompt(prompt)
}

fn tokens_u32(text: &GeneratedText) -> Vec<u32> {
    text.tokens.iter().map(|t| t.0).collect()
}

fn check_vocab(tokens: &[u32], vocab: usize) -> Result<Vec<TokenId>, String> {
    tokens
        .iter()
        .map(|&t| if (t as usize) < vocab { Ok(TokenId(t)) } else { Err(format!("token {t} outside vocabulary {vocab}")) })
        .collect()
}

pub fn generate(a: GenerateArgs) -> CliResult<()> {
    let key = parse_key(&a.key)?;
    let scheme: Scheme = a.scheme.parse().map_err(usage)?;
    let config = DecoderConfig::new(scheme, a.delta, a.alpha_dip, a.masking).map_err(usage)?;
    if a.n == 0 || a.count == 0 {
        return Err(usage("--n and --count must be positive"));
    }
    let prompt_len = a.prompt_len.unwrap_or(key.k.max(1));
    let spec = ModelSpec::parse(&a.model)?;
    let model = spec.build(prompt_len)?;
    let vocab = model.vocab_size();
    let label = a.label.clone().unwrap_or_else(|| {
        if scheme == Scheme::Plain { LABEL_PLAIN } else { LABEL_WATERMARKED }.to_string()
    });

    let records: Vec<TextRecord> = (0..a.count)
        .into_par_iter()
        .map(|id| {
            let prompt = random_prompt(a.seed, id, prompt_len, vocab);
            let mut aux = RngStream::derive(a.seed, &[ROLE_AUX, id as u64]);
            let g = run_generation(model.as_ref(), &key, &config, &prompt, a.n, &mut aux)
                .map_err(|e| runtime(format!("text {id}: {e}")))?;
            Ok(TextRecord {
                id,
                label: label.clone(),
                vocab_size: vocab,
                scheme: scheme.as_str().into(),
                prompt_len,
                tokens: tokens_u32(&g.text),
                diagnostics: Some(Diagnostics {
                    repeated_rate: g.repeated_rate(),
                    zero_green_fallbacks: g.steps.iter().filter(|s| s.zero_green_fallback).count(),
                    steps: g.steps.clone(),
                }),
                attack: None,
                replaced: None,
                specdec: None,
            })
        })
        .collect::<CliResult<_>>()?;
    write_jsonl(open_output(a.out.as_deref())?.as_mut(), &records)
}

fn calibration_dir(flag: Option<&Path>) -> Option<PathBuf> {
    if let Some(p) = flag {
        return Some(p.to_path_buf());
    }
    if let Some(p) = std::env::var_os(CALIB_DIR_ENV).filter(|v| !v.is_empty()) {
        return Some(PathBuf::from(p));
    }
    std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache").join("wmkit"))
}

fn open_cache(dir: Option<PathBuf>, reps: usize, seed: u64) -> CliResult<CalibrationCache> {
    match dir {
        Some(d) => CalibrationCache::open(&d.join(CALIBRATION_FILE), reps, seed).map_err(runtime),
        None => Ok(CalibrationCache::in_memory(reps, seed)),
    }
}

#[derive(Debug, Default, Serialize)]
struct DetectSummary {
    texts: usize,
    errors: usize,
    watermarked: usize,
    watermarked_rejected: usize,
    plain: usize,
    plain_rejected: usize,
    tpr: Option<f64>,
    fpr: Option<f64>,
}

pub fn detect(a: DetectArgs) -> CliResult<()> {
    let key = parse_key(&a.key)?;
    if !(a.alpha > 0.0 && a.alpha <= 1.0) {
        return Err(usage(format!("alpha must lie in (0, 1], got {}", a.alpha)));
    }
    let baseline: Option<Scheme> = a.baseline.as_deref().map(str::parse).transpose().map_err(usage)?;
    if let Some(s) = baseline {
        if !matches!(s, Scheme::Gumbel | Scheme::Soft | Scheme::Dipmark) {
            return Err(usage(format!("no baseline detector for {s}")));
        }
    }
    let stat: Statistic = a.stat.parse().map_err(usage)?;
    let side_flag: Option<Side> = a.side.as_deref().map(str::parse).transpose().map_err(usage)?;
    let needs_calibration = baseline.is_none() && matches!(stat, Statistic::HcPlus | Statistic::HcStar);
    if needs_calibration && a.calib_reps < MIN_CALIBRATION_REPS {
        return Err(usage(format!("--calib-reps must be >= {MIN_CALIBRATION_REPS}")));
    }
    let records: Vec<TextRecord> = read_jsonl(&a.input)?;
    let cache = if needs_calibration && !a.no_cache {
        open_cache(calibration_dir(a.calib_dir.as_deref()), a.calib_reps, a.calib_seed)?
    } else {
        CalibrationCache::in_memory(a.calib_reps, a.calib_seed)
    };
    let detector = baseline.map(|s| s.as_str().to_string()).unwrap_or_else(|| stat.as_str().to_string());

    enum Prepared {
        Values(Vec<f64>),
        Tokens(Vec<TokenId>, usize),
        Failed(String),
    }
    let prepared: Vec<Prepared> = records
        .par_iter()
        .map(|r| {
            let vocab = a.vocab.unwrap_or(r.vocab_size);
            let tokens = match check_vocab(&r.tokens, vocab) {
                Ok(t) => t,
                Err(e) => return Prepared::Failed(e),
            };
            if baseline.is_some() {
                return Prepared::Tokens(tokens, vocab);
            }
            let side = match (stat, side_flag) {
                (Statistic::Max, _) => Side::GreenOnly,
                (_, Some(s)) => s,
                _ if r.scheme == Scheme::McSoft.as_str() => Side::GreenOnly,
                _ => Side::Combined,
            };
            match extract_scores(&tokens, &key, vocab) {
                Ok(scores) => Prepared::Values(select_values(&scores, side)),
                Err(e) => Prepared::Failed(e.to_string()),
            }
        })
        .collect();

    // Calibrate each distinct length once before the per-text tests.
    if needs_calibration {
        let lengths: BTreeSet<usize> = prepared
            .iter()
            .filter_map(|p| match p {
                Prepared::Values(v) if v.len() >= stat.min_scores() => Some(v.len()),
                _ => None,
            })
            .collect();
        for n in lengths {
            cache.critical_value(stat, n, a.alpha).map_err(runtime)?;
        }
    }

    let out: Vec<DetectRecord> = records
        .par_iter()
        .zip(prepared.par_iter())
        .map(|(r, p)| {
            let result: Result<_, String> = match p {
                Prepared::Failed(e) => Err(e.clone()),
                Prepared::Values(v) => run_test(v, stat, a.alpha, &cache).map_err(|e: DetectError| e.to_string()),
                Prepared::Tokens(t, vocab) => {
                    detect_baseline(t, &key, *vocab, baseline.expect("tokens only for baselines"), a.alpha)
                        .map_err(|e| e.to_string())
                }
            };
            let (report, error) = match result {
                Ok(rep) => (Some(rep), None),
                Err(e) => (None, Some(e)),
            };
            DetectRecord { id: r.id, label: r.label.clone(), detector: detector.clone(), report, error }
        })
        .collect();

    let mut summary = DetectSummary { texts: out.len(), ..Default::default() };
    for d in &out {
        let Some(rep) = &d.report else {
            summary.errors += 1;
            continue;
        };
        if d.label == LABEL_PLAIN {
            summary.plain += 1;
            summary.plain_rejected += rep.reject as usize;
        } else {
            summary.watermarked += 1;
            summary.watermarked_rejected += rep.reject as usize;
        }
    }
    let rate = |k: usize, n: usize| (n > 0).then(|| k as f64 / n as f64);
    summary.tpr = rate(summary.watermarked_rejected, summary.watermarked);
    summary.fpr = rate(summary.plain_rejected, summary.plain);

    write_jsonl(open_output(a.out.as_deref())?.as_mut(), &out)?;
    let json = serde_json::to_string(&summary).map_err(runtime)?;
    eprintln!("summary: {json}");
    if let Some(path) = &a.summary {
        fs::write(path, format!("{json}\n")).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

pub fn attack(a: AttackArgs) -> CliResult<()> {
    match a.kind.as_str() {
        "substitute" => {}
        "specdec" => return Err(usage("speculative editing needs models; use the `specdec` command")),
        other => return Err(usage(format!("unknown attack kind `{other}`"))),
    }
    if !(0.0..=1.0).contains(&a.rate) {
        return Err(usage(format!("rate must lie in [0, 1], got {}", a.rate)));
    }
    let records: Vec<TextRecord> = read_jsonl(&a.input)?;
    let out: Vec<TextRecord> = records
        .into_par_iter()
        .map(|r| {
            let vocab = a.vocab.unwrap_or(r.vocab_size);
            let tokens = check_vocab(&r.tokens, vocab).map_err(|e| runtime(format!("text {}: {e}", r.id)))?;
            if r.prompt_len > tokens.len() {
                return Err(runtime(format!("text {}: prompt longer than text", r.id)));
            }
            let text = GeneratedText::new(tokens, r.prompt_len);
            let mut rng = RngStream::derive(a.seed, &[ROLE_ATTACK, r.id as u64]);
            let (attacked, replaced) =
                substitute(&text, a.rate, &mut rng, vocab).map_err(|e| runtime(format!("text {}: {e}", r.id)))?;
            Ok(TextRecord {
                tokens: tokens_u32(&attacked),
                diagnostics: None,
                attack: Some(format!("substitute:{}", a.rate)),
                replaced: Some(replaced),
                vocab_size: vocab,
                ..r
            })
        })
        .collect::<CliResult<_>>()?;
    write_jsonl(open_output(a.out.as_deref())?.as_mut(), &out)
}

pub fn specdec(a: SpecdecArgs) -> CliResult<()> {
    let key = parse_key(&a.key)?;
    let scheme: Scheme = a.draft_scheme.parse().map_err(usage)?;
    if !matches!(scheme, Scheme::Mc | Scheme::Gumbel | Scheme::Plain) {
        return Err(usage(format!("draft scheme must be mc, gumbel or plain, not {scheme}")));
    }
    if a.lookahead == 0 || !(a.accept_scale > 0.0 && a.accept_scale.is_finite()) {
        return Err(usage("--lookahead must be positive and --accept-scale finite and positive"));
    }
    if a.n == 0 || a.count == 0 {
        return Err(usage("--n and --count must be positive"));
    }
    let prompt_len = a.prompt_len.unwrap_or(key.k.max(1));
    let draft = ModelSpec::parse(&a.draft)?.build(prompt_len)?;
    let target = ModelSpec::parse(&a.target)?.build(prompt_len)?;
    let vocab = draft.vocab_size();
    if vocab != target.vocab_size() {
        return Err(usage(format!("draft vocabulary {vocab} differs from target {}", target.vocab_size())));
    }
    let config = SpecDecConfig { accept_scale: a.accept_scale, lookahead: a.lookahead };
    let label = if scheme == Scheme::Plain { LABEL_PLAIN } else { LABEL_WATERMARKED };

    let records: Vec<TextRecord> = (0..a.count)
        .into_par_iter()
        .map(|id| {
            let prompt = random_prompt(a.seed, id, prompt_len, vocab);
            let seed = fold_words(a.seed, [ROLE_SPECDEC, id as u64]);
            let (text, stats) =
                specdec_postprocess(draft.as_ref(), scheme, target.as_ref(), &key, config, &prompt, a.n, seed)
                    .map_err(|e| runtime(format!("text {id}: {e}")))?;
            Ok(TextRecord {
                id,
                label: label.into(),
                vocab_size: vocab,
                scheme: scheme.as_str().into(),
                prompt_len,
                tokens: tokens_u32(&text),
                diagnostics: None,
                attack: Some("specdec".into()),
                replaced: None,
                specdec: Some(stats),
            })
        })
        .collect::<CliResult<_>>()?;

    if let Some(path) = &a.stats {
        let mut total =
            SpecDecStats { drafted: 0, rejected: 0, rejection_rate: 0.0, accepted_run_lengths: vec![0; a.lookahead + 1] };
        for s in records.iter().filter_map(|r| r.specdec.as_ref()) {
            total.drafted += s.drafted;
            total.rejected += s.rejected;
            for (t, c) in total.accepted_run_lengths.iter_mut().zip(&s.accepted_run_lengths) {
                *t += c;
            }
        }
        if total.drafted > 0 {
            total.rejection_rate = total.rejected as f64 / total.drafted as f64;
        }
        let json = serde_json::to_string_pretty(&total).map_err(runtime)?;
        fs::write(path, format!("{json}\n")).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    write_jsonl(open_output(a.out.as_deref())?.as_mut(), &records)
}

/// Simulation settings accepted in a `--config` TOML file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimulateFile {
    regime: Option<String>,
    p: Option<f64>,
    q: Option<f64>,
    r: Option<f64>,
    m: Option<Vec<usize>>,
    reps: Option<usize>,
    alpha: Option<f64>,
    seed: Option<u64>,
    statistics: Option<Vec<String>>,
}

fn sim_error(e: SimError) -> CliError {
    match e {
        SimError::InvalidConfig(m) => usage(m),
        other => runtime(other),
    }
}

fn parse_stats(names: &[String]) -> CliResult<Vec<Statistic>> {
    names.iter().map(|s| s.parse().map_err(usage)).collect()
}

pub fn simulate(a: SimulateArgs) -> CliResult<()> {
    let file: SimulateFile = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => SimulateFile::default(),
    };
    let regime_name = a.regime.or(file.regime).ok_or_else(|| usage("--regime is required"))?;
    let regime = match regime_name.as_str() {
        "weak" => Regime::Weak { q: a.q.or(file.q).ok_or_else(|| usage("weak regime needs --q"))? },
        "strong" => Regime::Strong { r: a.r.or(file.r).ok_or_else(|| usage("strong regime needs --r"))? },
        other => return Err(usage(format!("unknown regime `{other}`"))),
    };
    let config = RegimeConfig {
        regime,
        p: a.p.or(file.p).ok_or_else(|| usage("--p is required"))?,
        m_grid: a.m.or(file.m).ok_or_else(|| usage("--m is required"))?,
        reps: a.reps.or(file.reps).unwrap_or(2000),
        alpha: a.alpha.or(file.alpha).unwrap_or(0.01),
        seed: a.seed.or(file.seed).unwrap_or(0),
    };
    config.validate().map_err(sim_error)?;
    let stats = match a.stats.or(file.statistics) {
        Some(names) => parse_stats(&names)?,
        None => POWER_STATISTICS.to_vec(),
    };
    let hist_stat: Statistic = a.hist_stat.parse().map_err(usage)?;

    let curve = run_power_with(&config, &stats, None).map_err(sim_error)?;
    curve.write_csv(open_output(a.out.as_deref())?).map_err(runtime)?;

    if let Some(path) = &a.hist {
        let m = a.hist_m.unwrap_or(config.m_grid[0]);
        let hist = null_histogram(hist_stat, m, config.reps, a.bins, config.seed, Some((config.regime, config.p)))
            .map_err(sim_error)?;
        hist.write_csv(open_output(Some(path))?).map_err(runtime)?;
        eprintln!(
            "histogram {} m={m}: null mean {:.4}, null skewness {:.4}",
            hist_stat.as_str(),
            hist.null_mean,
            hist.null_skewness
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ScanRow {
    p: f64,
    q: f64,
    region: String,
    statistic: String,
    power: f64,
    m: usize,
    reps: usize,
    alpha: f64,
}

pub fn scan(a: ScanArgs) -> CliResult<()> {
    let cells = boundary_scan(&a.p, &a.q, a.m, a.reps, a.alpha, a.seed, None).map_err(sim_error)?;
    let mut w = csv::Writer::from_writer(open_output(a.out.as_deref())?);
    for c in cells {
        let region = serde_json::to_value(c.region).map_err(runtime)?;
        w.serialize(ScanRow {
            p: c.p,
            q: c.q,
            region: region.as_str().unwrap_or_default().to_string(),
            statistic: c.statistic.as_str().into(),
            power: c.power,
            m: a.m,
            reps: a.reps,
            alpha: a.alpha,
        })
        .map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

pub fn calibrate(a: CalibrateArgs) -> CliResult<()> {
    let stat: Statistic = a.stat.parse().map_err(usage)?;
    if a.reps < MIN_CALIBRATION_REPS {
        return Err(usage(format!("--reps must be >= {MIN_CALIBRATION_REPS}, got {}", a.reps)));
    }
    if !(a.alpha > 0.0 && a.alpha <= 1.0) {
        return Err(usage(format!("alpha must lie in (0, 1], got {}", a.alpha)));
    }
    if a.n < stat.min_scores() {
        return Err(usage(format!("{stat} needs n >= {}", stat.min_scores())));
    }
    let cache = open_cache(calibration_dir(a.calib_dir.as_deref()), a.reps, a.seed)?;
    let calib = cache.get_or_calibrate(stat, a.n, a.alpha, a.reps, a.seed).map_err(runtime)?;
    let json = serde_json::to_string(&calib).map_err(runtime)?;
    let mut out = open_output(a.out.as_deref())?;
    writeln!(out, "{json}").map_err(runtime)?;
    out.flush().map_err(runtime)
}
