//! JSON Lines record formats shared by the commands.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use wmkit::attacks::SpecDecStats;
use wmkit::decoders::StepRecord;
use wmkit::detection::DetectionReport;

use crate::error::{runtime, CliResult};

pub const LABEL_WATERMARKED: &str = "watermarked";
pub const LABEL_PLAIN: &str = "plain";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub repeated_rate: f64,
    pub zero_green_fallbacks: usize,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: usize,
    pub label: String,
    pub vocab_size: usize,
    pub scheme: String,
    pub prompt_len: usize,
    pub tokens: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replaced: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specdec: Option<SpecDecStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectRecord {
    pub id: usize,
    pub label: String,
    pub detector: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<DetectionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    let file = File::open(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(runtime)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| runtime(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Output sink: a file when a path is given, standard output otherwise.
pub fn open_output(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(runtime)?;
            }
            let f = File::create(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
            Ok(Box::new(BufWriter::new(f)))
        }
        None => Ok(Box::new(BufWriter::new(io::stdout()))),
    }
}

pub fn write_jsonl<T: Serialize>(out: &mut dyn Write, records: &[T]) -> CliResult<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(runtime)?;
        writeln!(out, "{line}").map_err(runtime)?;
    }
    out.flush().map_err(runtime)
}
