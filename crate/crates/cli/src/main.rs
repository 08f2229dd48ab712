//! `gtool`: build tool graphs, train the graph encoder, plan, evaluate and run
//! ablation and robustness experiments.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gtool_core::corpus::{DatasetFormat, Split};
use gtool_core::embed::EmbedderKind;
use gtool_core::trainer::Ablation;

#[derive(Debug, Parser)]
#[command(name = "gtool", version, about = "Graph-enhanced tool planning")]
pub struct Cli {
    /// Leave wall-clock timings and timestamps out of every report.
    #[arg(long, global = true)]
    pub no_timestamps: bool,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the tool graph from the train split and export it.
    BuildGraph(RunArgs),
    /// Train the graph encoder and write a checkpoint.
    Train(RunArgs),
    /// Plan a single request with a trained checkpoint.
    Plan(PlanArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and evaluate all five ablation variants.
    Ablate(RunArgs),
    /// Train and evaluate on graphs with a fraction of edges deleted.
    Sweep(SweepArgs),
    /// Write a seeded synthetic dataset.
    Synth(SynthArgs),
}

/// Dataset, model and training settings shared by most commands.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file (native) or directory (taskbench, toole).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<DatasetFormat>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_embedder)]
    pub embedder: Option<EmbedderKind>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub embed_endpoint: Option<String>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub min_epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_ablation)]
    pub ablation: Option<Ablation>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Request text to plan for.
    #[arg(long)]
    pub request: String,
    /// Send the prompt to the model at GTOOL_LM_ENDPOINT instead of the mock.
    #[arg(long)]
    pub remote_lm: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Fraction of tool-graph edges deleted before evaluation.
    #[arg(long, default_value_t = 0.0)]
    pub mask_ratio: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated deletion ratios.
    #[arg(long, value_delimiter = ',', default_value = "0,0.3,0.6,0.9")]
    pub ratios: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset file (native format).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub tools: usize,
    #[arg(long, default_value_t = 0.15)]
    pub edge_prob: f64,
    #[arg(long, default_value_t = 200)]
    pub requests: usize,
    #[arg(long, default_value_t = 1)]
    pub min_len: usize,
    #[arg(long, default_value_t = 5)]
    pub max_len: usize,
    #[arg(long, default_value_t = 7)]
    pub vocab_seed: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_format(s: &str) -> Result<DatasetFormat, String> {
    s.parse().map_err(|e: gtool_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: gtool_core::Error| e.to_string())
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: gtool_core::Error| e.to_string())
}

fn parse_embedder(s: &str) -> Result<EmbedderKind, String> {
    match s {
        "hashed" => Ok(EmbedderKind::Hashed),
        "remote" => Ok(EmbedderKind::Remote),
        other => Err(format!("unknown embedder `{other}` (expected hashed or remote)")),
    }
}

/// A required flag was not given.
#[derive(Debug)]
pub struct MissingFlag(pub &'static str);

impl std::fmt::Display for MissingFlag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "missing required flag {}", self.0)
    }
}

impl std::error::Error for MissingFlag {}

/// 2 for dataset validation failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    use gtool_core::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Invalid(_) | E::UnknownTool { .. } | E::EmptyCatalog | E::Parse { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(if cli.no_timestamps { None } else { Some(env_logger::TimestampPrecision::Seconds) })
        .init();

    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
