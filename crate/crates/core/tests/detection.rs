use proptest::prelude::*;
use wmkit::decoders::{generate, DecoderConfig, Scheme};
use wmkit::detection::{
    calibrate_null, detect, detect_baseline, extract_scores, hc_statistic, irwin_hall_cdf, max_test, null_sample,
    run_test, sum_p_value, CalibrationCache, HcDenominator, HcVariant, Side, Statistic,
};
use wmkit::keying::{GreenMode, WatermarkKey};
use wmkit::lm::MarkovSource;
use wmkit::stats::{ks_critical_001, ks_statistic, normal_cdf, uniform_cdf};
use wmkit::{GeneratedText, RngStream, TokenId, UniformSource};

#[test]
fn irwin_hall_matches_monte_carlo() {
    let n = 5;
    let mut rng = RngStream::new(21);
    let mut sums: Vec<f64> = (0..1_000_000).map(|_| (0..n).map(|_| rng.next_uniform()).sum()).collect();
    sums.sort_unstable_by(f64::total_cmp);
    let total = sums.len() as f64;
    let mut worst: f64 = 0.0;
    for i in (0..sums.len()).step_by(997) {
        let f = irwin_hall_cdf(sums[i], n).unwrap();
        worst = worst.max((f - i as f64 / total).abs()).max((f - (i + 1) as f64 / total).abs());
    }
    assert!(worst < 0.002, "max deviation {worst}");
}

#[test]
fn irwin_hall_is_monotone_and_meets_normal_branch() {
    let mut prev = 0.0;
    for i in 0..=1400 {
        let s = i as f64 / 100.0;
        let f = irwin_hall_cdf(s, 14).unwrap();
        assert!(f >= prev - 1e-12);
        prev = f;
    }
    for s in [6.0, 7.0, 8.0] {
        let exact = irwin_hall_cdf(s, 14).unwrap();
        let approx = normal_cdf((s - 7.0) / (14.0f64 / 12.0).sqrt());
        assert!((exact - approx).abs() < 0.01, "s = {s}: {exact} vs {approx}");
        assert_eq!(sum_p_value(s, 14), exact);
    }
}

#[test]
fn every_statistic_controls_size() {
    let alpha = 0.01;
    let trials = 10_000;
    let n = 200;
    let cache = CalibrationCache::in_memory(2000, 99);
    let tol = 3.0 * (alpha * (1.0 - alpha) / trials as f64).sqrt();
    for stat in Statistic::ALL {
        let rejections = (0..trials)
            .filter(|&t| {
                let x = null_sample(12345, n, t);
                run_test(&x, stat, alpha, &cache).unwrap().reject
            })
            .count();
        let rate = rejections as f64 / trials as f64;
        assert!((rate - alpha).abs() <= tol + 1e-12, "{stat}: rate {rate}");
    }
}

#[test]
fn max_test_has_exact_size() {
    let alpha = 0.05;
    let trials = 20_000;
    let rate = (0..trials)
        .filter(|&t| max_test(&null_sample(7, 30, t), alpha).unwrap().reject)
        .count() as f64
        / trials as f64;
    assert!((rate - alpha).abs() < 0.005, "rate {rate}");
    // Analytic: P(max <= α^{1/n}) = (α^{1/n})^n.
    let c = alpha.powf(1.0 / 30.0);
    assert!((c.powi(30) - alpha).abs() < 1e-12);
}

#[test]
fn max_test_has_full_power_when_support_is_bounded() {
    let gap = 0.1;
    let n = 100; // 0.01^{1/100} ≈ 0.955 > 0.9
    let mut rng = RngStream::new(3);
    for _ in 0..200 {
        let x: Vec<f64> = (0..n).map(|_| (1.0 - gap) * rng.next_uniform()).collect();
        assert!(max_test(&x, 0.01).unwrap().reject);
    }
}

#[test]
fn hc_plus_calibration_exceeds_asymptotic_scale() {
    let c = calibrate_null(Statistic::HcPlus, 1000, 0.01, 2000, 1).unwrap();
    let scale = (2.0 * (1000f64).ln().ln()).sqrt();
    assert!(c.critical_value.is_finite() && c.critical_value > scale, "{}", c.critical_value);
}

#[test]
fn calibrated_hc_false_positive_rate() {
    let c = calibrate_null(Statistic::HcPlus, 300, 0.01, 2000, 2).unwrap().critical_value;
    let trials = 10_000;
    let fp = (0..trials)
        .filter(|&t| {
            let x = null_sample(777, 300, t);
            hc_statistic(&x, HcVariant::Plus, HcDenominator::Sqrt).unwrap() > c
        })
        .count();
    assert!(fp as f64 / trials as f64 <= 0.015);
}

#[test]
fn calibration_at_alpha_one_takes_minimum() {
    let c = calibrate_null(Statistic::HcStar, 50, 1.0, 1000, 3).unwrap();
    let values: Vec<f64> = (0..1000)
        .map(|r| hc_statistic(&null_sample(3, 50, r), HcVariant::Star, HcDenominator::Sqrt).unwrap())
        .collect();
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(c.critical_value, min);
}

#[test]
fn calibration_rejects_too_few_reps() {
    assert!(calibrate_null(Statistic::HcPlus, 100, 0.01, 999, 0).is_err());
}

#[test]
fn unkeyed_text_scores_are_uniform() {
    let model = MarkovSource::new(2, 64, 0.3, 11, 1.0).unwrap();
    let gen_key = WatermarkKey::new(1, 2, 0.5, GreenMode::Hash).unwrap();
    let detect_key = WatermarkKey::new(0xdead_beef, 2, 0.5, GreenMode::Hash).unwrap();
    let plain = DecoderConfig::new(Scheme::Plain, None, None, false).unwrap();
    let mut zetas = Vec::new();
    let mut i = 0u32;
    while zetas.len() < 10_000 {
        let prompt = GeneratedText::from_prompt(vec![TokenId(i % 64), TokenId(i / 64 % 64)]);
        let gen = generate(&model, &gen_key, &plain, &prompt, 300, &mut RngStream::new(i as u64)).unwrap();
        for s in extract_scores(gen.text.continuation(), &detect_key, 64).unwrap() {
            zetas.push(s.zeta_prime);
        }
        i += 1;
    }
    zetas.truncate(10_000);
    let d = ks_statistic(&zetas, uniform_cdf(0.0, 1.0));
    assert!(d < ks_critical_001(zetas.len()), "KS {d}");
}

#[test]
fn mc_text_is_detected_and_wrong_key_is_not() {
    let model = MarkovSource::new(2, 64, 0.3, 7, 1.0).unwrap();
    let key = WatermarkKey::new(0x9e37_79b9_7f4a_7c15, 2, 0.5, GreenMode::Hash).unwrap();
    let wrong = WatermarkKey::new(0x1234, 2, 0.5, GreenMode::Hash).unwrap();
    let cache = CalibrationCache::in_memory(2000, 0);
    let mut hits = 0;
    let mut false_hits = 0;
    for i in 0..40u32 {
        let prompt = GeneratedText::from_prompt(vec![TokenId(i), TokenId(i + 1)]);
        let gen = generate(&model, &key, &DecoderConfig::mc(), &prompt, 300, &mut RngStream::new(i as u64)).unwrap();
        let text = gen.text.continuation();
        hits += detect(text, &key, 64, Statistic::Sum, 0.01, Side::Combined, &cache).unwrap().reject as usize;
        false_hits += detect(text, &wrong, 64, Statistic::Sum, 0.01, Side::Combined, &cache).unwrap().reject as usize;
    }
    assert!(hits >= 38, "hits {hits}");
    assert!(false_hits <= 2, "false hits {false_hits}");
}

#[test]
fn baseline_detectors_flag_their_own_schemes() {
    let model = MarkovSource::new(2, 64, 0.5, 8, 1.0).unwrap();
    let key = WatermarkKey::new(77, 2, 0.5, GreenMode::Hash).unwrap();
    for (config, scheme) in [
        (DecoderConfig::new(Scheme::Gumbel, None, None, false).unwrap(), Scheme::Gumbel),
        (DecoderConfig::new(Scheme::Soft, Some(2.0), None, false).unwrap(), Scheme::Soft),
        (DecoderConfig::new(Scheme::Dipmark, None, Some(0.45), false).unwrap(), Scheme::Dipmark),
    ] {
        let prompt = GeneratedText::from_prompt(vec![TokenId(1), TokenId(2)]);
        let gen = generate(&model, &key, &config, &prompt, 400, &mut RngStream::new(1)).unwrap();
        let report = detect_baseline(gen.text.continuation(), &key, 64, scheme, 0.01).unwrap();
        assert!(report.reject, "{scheme}: {report:?}");
    }
}

#[test]
fn gumbel_baseline_single_score_p_value() {
    let key = WatermarkKey::new(5, 1, 0.5, GreenMode::Hash).unwrap();
    let text = [TokenId(3), TokenId(9)];
    let r = detect_baseline(&text, &key, 16, Scheme::Gumbel, 0.01).unwrap();
    let u = 1.0 - (-r.value).exp();
    assert!((r.p_value.unwrap() - (1.0 - u)).abs() < 1e-12);
}

#[test]
fn report_serializes_negative_infinity_as_null() {
    let cache = CalibrationCache::in_memory(1000, 0);
    let r = run_test(&[0.001, 0.002, 0.003], Statistic::HcPlus, 0.01, &cache).unwrap();
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"value\":null"), "{json}");
    assert!(!r.reject);
}

proptest! {
    #[test]
    fn hc_is_permutation_invariant(mut x in prop::collection::vec(0.0f64..1.0, 2..200), seed in any::<u64>()) {
        let a = hc_statistic(&x, HcVariant::Plus, HcDenominator::Sqrt).unwrap();
        let b = hc_statistic(&x, HcVariant::Star, HcDenominator::Linear).unwrap();
        RngStream::new(seed).shuffle(&mut x);
        prop_assert_eq!(hc_statistic(&x, HcVariant::Plus, HcDenominator::Sqrt).unwrap().to_bits(), a.to_bits());
        prop_assert_eq!(hc_statistic(&x, HcVariant::Star, HcDenominator::Linear).unwrap().to_bits(), b.to_bits());
    }

    #[test]
    fn sum_p_value_is_a_probability(x in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let p = sum_p_value(x.iter().sum(), x.len());
        prop_assert!((0.0..=1.0).contains(&p));
    }
}
