//! `sparsespeech` command-line tool: synthetic corpora, training, posteriorgram
//! generation, ABX and probe evaluation, and Gumbel-Softmax sample sweeps.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ConditionChoice;
use sparsespeech::abx::Distance;
use sparsespeech::model::Bottleneck;

pub const VERSION: &str = concat!("sparsespeech ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(
    name = "sparsespeech",
    version,
    about = "Gumbel-Softmax Sparsespeech toolkit"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Also write JSON mirrors of the CSV reports.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Train a model on the `train` utterances of a corpus.
    Train(TrainArgs),
    /// Write posteriorgrams for a corpus from a trained checkpoint.
    Generate(GenerateArgs),
    /// ABX discriminability of features or posteriorgrams.
    EvalAbx(EvalAbxArgs),
    /// Phone error rate of a CTC probe trained on a labeled fraction.
    EvalPer(EvalPerArgs),
    /// Draw Gumbel-Softmax samples over a grid of temperatures.
    GumbelSweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Synthetic corpus spec (TOML); overrides the `[synth]` section of --config.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub utterances: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long, value_parser = parse_bottleneck)]
    pub bottleneck: Option<Bottleneck>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Softmax temperature; must be positive.
    #[arg(long, value_parser = parse_positive)]
    pub tau: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalAbxArgs {
    /// Directory with a manifest of features or posteriorgrams.
    #[arg(long)]
    pub reps: PathBuf,
    /// Phone alignments (default: `alignments.tsv` inside --reps).
    #[arg(long)]
    pub alignments: Option<PathBuf>,
    #[arg(long, value_parser = parse_distance)]
    pub distance: Option<Distance>,
    #[arg(long, value_enum)]
    pub condition: Option<ConditionChoice>,
    /// `all` or a manifest subset tag.
    #[arg(long)]
    pub subset: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalPerArgs {
    #[arg(long)]
    pub reps: PathBuf,
    /// Transcripts (default: `transcripts.tsv` inside --reps).
    #[arg(long)]
    pub transcripts: Option<PathBuf>,
    /// Phone inventory (default: `phones.txt` inside --reps).
    #[arg(long)]
    pub phones: Option<PathBuf>,
    /// Probe configuration (TOML); overrides the `[probe]` section of --config.
    #[arg(long)]
    pub probe_config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated temperatures.
    #[arg(long, value_delimiter = ',', value_parser = parse_positive)]
    pub taus: Option<Vec<f64>>,
    #[arg(long)]
    pub draws: Option<usize>,
    /// Number of categories.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v: f64 = s
        .parse()
        .map_err(|e| format!("`{s}` is not a number: {e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a positive finite number, got {s}"))
    }
}

fn parse_distance(s: &str) -> Result<Distance, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_bottleneck(s: &str) -> Result<Bottleneck, String> {
    match s {
        "gumbel" => Ok(Bottleneck::Gumbel),
        "softmax" => Ok(Bottleneck::Softmax),
        other => Err(format!(
            "unknown bottleneck `{other}` (expected gumbel or softmax)"
        )),
    }
}

/// 2 for data and contract errors, 3 for numeric failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<sparsespeech::Error>())
        .any(|e| e.is_numeric());
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
