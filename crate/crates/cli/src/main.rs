//! `msd`: data generation, target pretraining, draft training, benchmarks,
//! losslessness certification and ablation reports.
//!
//! All randomness derives from the global `--seed` (see `streams`).
//! Exit codes: 0 success, 1 usage or runtime error, 2 a certification or
//! assertion failure.

mod artifacts;
mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Marks errors that mean "the check ran and failed" (exit code 2).
#[derive(Debug)]
pub struct AssertionFailure(pub String);

impl std::fmt::Display for AssertionFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for AssertionFailure {}

/// Stream ids fed to `derive_seed(--seed, id)`; one per consumer.
pub mod streams {
    pub const GRAMMAR: u64 = 1;
    pub const TEXT: u64 = 2;
    pub const VISUAL: u64 = 3;
    pub const TEXT_SPLIT: u64 = 4;
    pub const VISUAL_SPLIT: u64 = 5;
    pub const PRETRAIN: u64 = 10;
    pub const TRAIN: u64 = 20;
    pub const DRAFT_INIT: u64 = 21;
    pub const BENCH: u64 = 30;
    pub const BOOTSTRAP: u64 = 40;
}

#[derive(Parser, Debug)]
#[command(name = "msd", version, about = "Multimodal speculative decoding experiments")]
pub struct Cli {
    /// Root seed; every random stream is derived from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write text and visual instruction corpora plus a split manifest.
    GenData(GenDataArgs),
    /// Pretrain the toy target on a generated corpus.
    PretrainTarget(PretrainArgs),
    /// Train one draft variant against a pretrained target.
    Train(TrainArgs),
    /// Speculative decoding over held-out visual examples.
    Bench(BenchArgs),
    /// Exhaustively compare speculative and autoregressive output distributions.
    VerifyLossless(LosslessArgs),
    /// Aggregate bench runs into ablation tables with bootstrap comparisons.
    Report(ReportArgs),
}

#[derive(Args, Debug, serde::Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Examples per corpus.
    #[arg(long, default_value_t = 4000)]
    pub count: usize,
    /// Image grid side (1..=3).
    #[arg(long, default_value_t = 3)]
    pub side: usize,
    /// Overwrite existing corpus files.
    #[arg(long)]
    #[serde(skip)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output weight file.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON pretraining config; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Decoupled,
    BaselineConcat,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Target weight file from `pretrain-target`.
    #[arg(long)]
    pub target: PathBuf,
    /// Output draft weight file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// vision-only | vision1-vision2 | text-only | two-stage-direct | two-stage-gradual
    #[arg(long)]
    pub strategy: Option<String>,
    /// JSON training config; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Loss curve CSV (defaults to the weight path with a `.csv` extension).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Chain,
    Tree,
    Both,
}

#[derive(Args, Debug, serde::Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long)]
    pub draft: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = BenchMode::Both)]
    pub mode: BenchMode,
    #[arg(long, default_value_t = 4)]
    pub gamma: usize,
    /// Tree branching per depth, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "4,2,2,1,1")]
    pub tree_plan: Vec<usize>,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    /// Held-out visual examples to decode.
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 24)]
    pub max_tokens: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    Standard,
    /// Broken `p/q` rule without the cap; certification must fail.
    #[value(hide = true)]
    UncappedRatio,
}

#[derive(Args, Debug)]
pub struct LosslessArgs {
    #[arg(long, value_enum, default_value_t = RuleArg::Standard)]
    pub rule: RuleArg,
    /// Seeded instances per (vocab, temperature, mode) cell.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    /// Write the full report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Bench output directories.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    /// Output directory for report.json, report.csv and report.md.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub resamples: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let assertion = e.downcast_ref::<AssertionFailure>().is_some()
                || matches!(e.downcast_ref::<msd_core::Error>(), Some(msd_core::Error::GreedyMismatch { .. }));
            ExitCode::from(if assertion { 2 } else { 1 })
        }
    }
}
