//! `wmkit`: generate watermarked token sequences, detect them, attack them
//! and run the sparse-mixture power simulations.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod error;
mod model;
mod records;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "wmkit", version, about = "Maximal-coupling green/red-list watermark toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate token sequences with a watermarking decoder.
    Generate(GenerateArgs),
    /// Test texts for a watermark and write one report per text.
    Detect(DetectArgs),
    /// Apply random token substitution to texts.
    Attack(AttackArgs),
    /// Rewrite a watermarked draft through speculative sampling against a target model.
    Specdec(SpecdecArgs),
    /// Power curves of the sum and higher-criticism tests over an m grid.
    Simulate(SimulateArgs),
    /// Weak-regime power over a (p, q) grid at fixed m.
    Scan(ScanArgs),
    /// Simulate a null critical value and store it in the calibration cache.
    Calibrate(CalibrateArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Model spec: `markov:seed=S,vocab=V,order=O[,conc=C][,temp=T]` or `trace:PATH`.
    #[arg(long)]
    pub model: String,
    /// Watermark key, e.g. `9e3779b97f4a7c15:k=2:g=0.5:mode=hash`.
    #[arg(long)]
    pub key: String,
    /// Decoder: mc, mc_soft, gumbel, soft, dipmark or plain.
    #[arg(long, default_value = "mc")]
    pub scheme: String,
    /// Green-token log boost for mc_soft and soft.
    #[arg(long)]
    pub delta: Option<f64>,
    /// DiPmark reweighting parameter in [0, 0.5).
    #[arg(long)]
    pub alpha_dip: Option<f64>,
    /// Skip the watermark at contexts already used in the same text.
    #[arg(long)]
    pub masking: bool,
    /// Tokens to generate per text.
    #[arg(long)]
    pub n: usize,
    /// Number of texts.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Random prompt length (defaults to the key's context width, at least 1).
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Label stored on every record (defaults to `watermarked`, or `plain` for the plain scheme).
    #[arg(long)]
    pub label: Option<String>,
    /// Output JSONL path (standard output when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    /// Input JSONL of text records.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub key: String,
    /// Test statistic: sum, hc+, hc* or max.
    #[arg(long, default_value = "sum")]
    pub stat: String,
    /// Use a baseline detector instead: gumbel, soft or dipmark.
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    /// Scores to test: combined (every token) or green (green tokens only).
    /// Defaults to green for mc_soft texts and combined otherwise.
    #[arg(long)]
    pub side: Option<String>,
    /// Null replicates per HC calibration.
    #[arg(long, default_value_t = 2000)]
    pub calib_reps: usize,
    #[arg(long, default_value_t = 0)]
    pub calib_seed: u64,
    /// Calibration cache directory (overrides WMKIT_CALIB_DIR).
    #[arg(long)]
    pub calib_dir: Option<PathBuf>,
    /// Keep calibrations in memory only.
    #[arg(long)]
    pub no_cache: bool,
    /// Vocabulary size, overriding the records' own.
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the TPR/FPR summary as JSON here.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    /// Attack kind; only `substitute` rewrites existing texts (see `specdec`).
    #[arg(long, default_value = "substitute")]
    pub kind: String,
    /// Per-token substitution probability.
    #[arg(long)]
    pub rate: f64,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Vocabulary size, overriding the records' own.
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SpecdecArgs {
    /// Base model behind the watermarked draft.
    #[arg(long)]
    pub draft: String,
    /// Target model that verifies the draft.
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub key: String,
    /// Draft decoder: mc, gumbel or plain.
    #[arg(long, default_value = "mc")]
    pub draft_scheme: String,
    #[arg(long, default_value_t = 4)]
    pub lookahead: usize,
    /// Scale on the accept test; 1 is exact speculative sampling.
    #[arg(long, default_value_t = 0.5)]
    pub accept_scale: f64,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Aggregate statistics JSON path.
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// TOML file with any of: regime, p, q, r, m, reps, alpha, seed, statistics.
    /// Flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// strong (green mass >= m^-r) or weak (green mass = 1 - m^-q).
    #[arg(long)]
    pub regime: Option<String>,
    /// Sparsity exponent: a fraction m^-p of scores carry signal.
    #[arg(long)]
    pub p: Option<f64>,
    /// Weak-regime exponent.
    #[arg(long)]
    pub q: Option<f64>,
    /// Strong-regime exponent.
    #[arg(long)]
    pub r: Option<f64>,
    /// Comma-separated m grid.
    #[arg(long, value_delimiter = ',')]
    pub m: Option<Vec<usize>>,
    /// Replicates per m for both calibration and power (at least 1000).
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated statistics (default sum,hc+).
    #[arg(long, value_delimiter = ',')]
    pub stats: Option<Vec<String>>,
    /// Power curve CSV path (standard output when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write a null/alternative histogram CSV here.
    #[arg(long)]
    pub hist: Option<PathBuf>,
    /// Statistic for the histogram (default hc+).
    #[arg(long, default_value = "hc+")]
    pub hist_stat: String,
    /// m for the histogram (default: first grid value).
    #[arg(long)]
    pub hist_m: Option<usize>,
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
}

#[derive(Args, Debug)]
pub struct ScanArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub p: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub q: Vec<f64>,
    #[arg(long)]
    pub m: usize,
    #[arg(long, default_value_t = 2000)]
    pub reps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// Statistic: sum, hc+, hc* or max.
    #[arg(long)]
    pub stat: String,
    /// Number of scores.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    #[arg(long, default_value_t = 2000)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub calib_dir: Option<PathBuf>,
    /// Print the calibration record here as well (standard output when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Detect(a) => commands::detect(a),
        Command::Attack(a) => commands::attack(a),
        Command::Specdec(a) => commands::specdec(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Scan(a) => commands::scan(a),
        Command::Calibrate(a) => commands::calibrate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wmkit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
