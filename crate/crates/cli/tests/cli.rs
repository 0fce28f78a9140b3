use std::path::Path;
use std::process::{Command, Output};

const KEY: &str = "9e3779b97f4a7c15:k=2:g=0.5:mode=hash";
const MODEL: &str = "markov:seed=7,vocab=64,order=2";

fn wmkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wmkit")).args(args).output().expect("spawn wmkit")
}

fn ok(args: &[&str]) -> String {
    let out = wmkit(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn help_lists_every_command() {
    let help = ok(&["--help"]);
    for cmd in ["generate", "detect", "attack", "specdec", "simulate", "scan", "calibrate"] {
        assert!(help.contains(cmd), "{cmd}");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let cases: &[&[&str]] = &[
        &["generate", "--model", MODEL, "--key", KEY, "--n", "5", "--scheme", "mc_soft"],
        &["generate", "--model", MODEL, "--key", KEY, "--n", "5", "--delta", "1"],
        &["generate", "--model", "gpt:big", "--key", KEY, "--n", "5"],
        &["generate", "--model", MODEL, "--key", "zz", "--n", "5"],
        &["simulate", "--regime", "weak", "--p", "0.2", "--q", "0.3", "--m", "100", "--reps", "999"],
        &["simulate", "--regime", "weak", "--p", "0.2", "--m", "100"],
        &["calibrate", "--stat", "hc+", "--n", "50", "--reps", "10"],
        &["generate", "--bogus"],
    ];
    for args in cases {
        assert_eq!(wmkit(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn missing_input_is_a_runtime_error() {
    let out = wmkit(&["detect", "--input", "/nonexistent/texts.jsonl", "--key", KEY]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn generate_writes_one_record_per_text_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g.jsonl");
    ok(&["generate", "--model", MODEL, "--key", KEY, "--n", "30", "--count", "5", "--seed", "1", "--out", p(&out)]);
    let recs = lines(&out);
    assert_eq!(recs.len(), 5);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r["id"], i);
        assert_eq!(r["label"], "watermarked");
        assert_eq!(r["tokens"].as_array().unwrap().len(), 32);
        assert_eq!(r["diagnostics"]["steps"].as_array().unwrap().len(), 30);
    }
    // Standard output carries the same bytes.
    let stdout = ok(&["generate", "--model", MODEL, "--key", KEY, "--n", "30", "--count", "5", "--seed", "1"]);
    assert_eq!(stdout, std::fs::read_to_string(&out).unwrap());
}

#[test]
fn detect_separates_watermarked_from_plain() {
    let dir = tempfile::tempdir().unwrap();
    let wm = dir.path().join("wm.jsonl");
    let plain = dir.path().join("plain.jsonl");
    ok(&["generate", "--model", MODEL, "--key", KEY, "--n", "200", "--count", "20", "--seed", "2", "--out", p(&wm)]);
    ok(&[
        "generate", "--model", MODEL, "--key", KEY, "--scheme", "plain", "--n", "200", "--count", "20", "--seed", "3",
        "--out", p(&plain),
    ]);
    let mut all = std::fs::read_to_string(&wm).unwrap();
    all.push_str(&std::fs::read_to_string(&plain).unwrap());
    let input = dir.path().join("all.jsonl");
    std::fs::write(&input, all).unwrap();
    let summary = dir.path().join("summary.json");
    ok(&["detect", "--input", p(&input), "--key", KEY, "--out", p(&dir.path().join("d.jsonl")), "--summary", p(&summary)]);
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(s["watermarked"], 20);
    assert_eq!(s["plain"], 20);
    assert!(s["tpr"].as_f64().unwrap() >= 0.95);
    assert!(s["fpr"].as_f64().unwrap() <= 0.1);
}

#[test]
fn detect_reports_bad_records_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.jsonl");
    std::fs::write(
        &input,
        concat!(
            r#"{"id":0,"label":"watermarked","vocab_size":64,"scheme":"mc","prompt_len":2,"tokens":[1,2]}"#,
            "\n",
            r#"{"id":1,"label":"watermarked","vocab_size":64,"scheme":"mc","prompt_len":2,"tokens":[1,2,99]}"#,
            "\n",
            r#"{"id":2,"label":"plain","vocab_size":64,"scheme":"plain","prompt_len":2,"tokens":[1,2,3,4,5]}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = dir.path().join("d.jsonl");
    ok(&["detect", "--input", p(&input), "--key", KEY, "--out", p(&out)]);
    let recs = lines(&out);
    assert!(recs[0]["error"].is_string(), "too short");
    assert!(recs[1]["error"].as_str().unwrap().contains("outside vocabulary"));
    assert!(recs[2]["report"].is_object());
}

#[test]
fn hc_detection_fills_the_calibration_cache() {
    let dir = tempfile::tempdir().unwrap();
    let texts = dir.path().join("g.jsonl");
    ok(&["generate", "--model", MODEL, "--key", KEY, "--n", "60", "--count", "2", "--seed", "4", "--out", p(&texts)]);
    let calib = dir.path().join("calib");
    let out = Command::new(env!("CARGO_BIN_EXE_wmkit"))
        .args(["detect", "--input", p(&texts), "--key", KEY, "--stat", "hc+", "--calib-reps", "1000"])
        .env("WMKIT_CALIB_DIR", &calib)
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = std::fs::read_to_string(calib.join("calibration.csv")).unwrap();
    assert!(csv.starts_with("statistic,n,alpha,reps,seed,critical_value"));
    assert!(csv.lines().skip(1).all(|l| l.starts_with("hc+,")));
}

#[test]
fn attack_replaces_tokens_and_keeps_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let texts = dir.path().join("g.jsonl");
    let attacked = dir.path().join("a.jsonl");
    ok(&["generate", "--model", MODEL, "--key", KEY, "--n", "100", "--count", "3", "--seed", "5", "--out", p(&texts)]);
    ok(&["attack", "--input", p(&texts), "--rate", "1", "--seed", "6", "--out", p(&attacked)]);
    for (before, after) in lines(&texts).iter().zip(lines(&attacked)) {
        let (b, a) = (before["tokens"].as_array().unwrap(), after["tokens"].as_array().unwrap());
        assert_eq!(b[..2], a[..2]);
        assert!(b[2..].iter().zip(&a[2..]).all(|(x, y)| x != y));
        assert_eq!(after["replaced"], 100);
        assert_eq!(after["attack"], "substitute:1");
    }
    assert_eq!(wmkit(&["attack", "--input", p(&texts), "--rate", "1.5"]).status.code(), Some(2));
    assert_eq!(wmkit(&["attack", "--kind", "specdec", "--input", p(&texts), "--rate", "0.1"]).status.code(), Some(2));
}

#[test]
fn specdec_writes_stats() {
    let dir = tempfile::tempdir().unwrap();
    let stats = dir.path().join("s.json");
    let out = dir.path().join("o.jsonl");
    ok(&[
        "specdec", "--draft", MODEL, "--target", MODEL, "--key", KEY, "--n", "40", "--count", "3", "--lookahead", "3",
        "--out", p(&out), "--stats", p(&stats),
    ]);
    let s: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!(s["accepted_run_lengths"].as_array().unwrap().len(), 4);
    assert!(s["drafted"].as_u64().unwrap() >= 120);
    for r in lines(&out) {
        assert_eq!(r["tokens"].as_array().unwrap().len(), 42);
    }
}

#[test]
fn simulate_reads_toml_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("sim.toml");
    std::fs::write(&config, "regime = \"weak\"\np = 0.2\nq = 0.3\nm = [50, 100]\nreps = 1000\nseed = 1\n").unwrap();
    let csv = ok(&["simulate", "--config", p(&config)]);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "regime,p,q_or_r,m,statistic,reps,alpha,critical_value,power,seed");
    assert_eq!(rows.len(), 5);
    let overridden = ok(&["simulate", "--config", p(&config), "--m", "60", "--stats", "sum"]);
    let rows: Vec<&str> = overridden.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].starts_with("weak,0.2,0.3,60,sum,1000,"));

    std::fs::write(&config, "regime = \"weak\"\nbogus = 1\n").unwrap();
    assert_eq!(wmkit(&["simulate", "--config", p(&config)]).status.code(), Some(2));
}

#[test]
fn calibrate_reuses_cached_record() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["calibrate", "--stat", "hc+", "--n", "30", "--reps", "1000", "--calib-dir", p(dir.path())];
    let first = ok(&args);
    let v: serde_json::Value = serde_json::from_str(first.trim()).unwrap();
    assert_eq!(v["statistic"], "hc+");
    assert!(v["critical_value"].as_f64().unwrap() > 1.0);
    assert_eq!(ok(&args), first);
}

#[test]
fn trace_model_replays_recorded_rows() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let mut rows = String::from("{\"vocab_size\":3,\"n_steps\":4}\n");
    for t in 0..4 {
        rows.push_str(&format!("{{\"t\":{t},\"probs\":[0.0,0.0,1.0]}}\n"));
    }
    std::fs::write(&trace, rows).unwrap();
    let spec = format!("trace:{}", p(&trace));
    let out = ok(&["generate", "--model", &spec, "--key", KEY, "--scheme", "plain", "--n", "4"]);
    let rec: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(rec["tokens"].as_array().unwrap()[2..], [2, 2, 2, 2]);
    assert_eq!(wmkit(&["generate", "--model", &spec, "--key", KEY, "--scheme", "plain", "--n", "5"]).status.code(), Some(1));
}
