//! Command-line harness for the what/where networks: dataset generation,
//! training, evaluation, pruning, parameter transplants, gradient probes,
//! warm starts, and unit-level analyses.
//!
//! Conventions shared by every subcommand:
//!
//! * `--out DIR` names an output directory; each run appends one line to
//!   `DIR/manifest.jsonl` recording the resolved configuration and seeds.
//!   `WW_OUT_ROOT` prefixes relative output paths.
//! * A single `--seed` drives every random stream. Derived streams use
//!   stable labels ("init", "holdout", "reinit", ...) hashed together with
//!   the root seed, so one integer reproduces an entire run.
//! * Exit codes: 0 success, 2 bad flags, 3 unreadable or inconsistent
//!   inputs, 4 numeric failure (divergence, undefined statistics).
//! * Input files are never modified.
//! * `WW_THREADS` caps the worker pool used by dataset rendering.

mod commands;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use whatwhere::analysis::AnalysisError;
use whatwhere::data::DataError;
use whatwhere::graph::GraphError;
use whatwhere::netspec::SpecError;
use whatwhere::train::TrainError;

/// Errors sorted by exit code: flag problems (2), unreadable or
/// inconsistent inputs (3), numeric failures (4).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Input(String),
    Numeric(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Input(_) => "input",
            CliError::Numeric(_) => "numeric",
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Input(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Input(m) | CliError::Numeric(m) => {
                write!(f, "{m}")
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidConfig(m) => CliError::Usage(m),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<SpecError> for CliError {
    fn from(e: SpecError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::DivergedSink(_) => CliError::Numeric(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(m) => CliError::Usage(m),
            TrainError::Diverged { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::InvalidArg(m) => CliError::Usage(m),
            AnalysisError::UndefinedCorrelation(_) | AnalysisError::DegenerateSpectrum(_) => {
                CliError::Numeric(e.to_string())
            }
            AnalysisError::Train(t) => t.into(),
            AnalysisError::Data(d) => d.into(),
            AnalysisError::Graph(g) => g.into(),
            other => CliError::Input(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "whatwhere",
    version,
    about = "Train, dissect, and compare pose-regularized two-head networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic pose-labeled dataset and split it by instance
    GenData(GenDataArgs),
    /// Train one architecture, writing an epoch log and a checkpoint
    Train(TrainArgs),
    /// Evaluate a checkpoint: accuracy, per-class AP, confusion counts
    Eval(EvalArgs),
    /// Strip the pose machinery from a checkpoint, keeping the base net
    Prune(PruneArgs),
    /// Copy parameters into a fresh architecture, re-initializing the rest
    Transplant(TransplantArgs),
    /// Measure gradient norms per parameter partition at a checkpoint
    Probe(ProbeArgs),
    /// Warm-start one architecture from another and log warm vs cold curves
    Warmstart(WarmstartArgs),
    /// Unit reports: entropy decoupling, receptive fields, 2-D embedding
    Analyze(AnalyzeArgs),
}

/// Flags mirroring the generation config field for field; values given here
/// override the config file, which overrides the built-in defaults.
#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// TOML file with generation settings
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub categories: Option<usize>,
    #[arg(long)]
    pub n_rot: Option<usize>,
    #[arg(long)]
    pub n_az: Option<usize>,
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub backgrounds: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Glyph family: a or b
    #[arg(long)]
    pub shape_set: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of instances per category in the training split; 1 skips
    /// the split and writes a single file
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags mirroring the training config field for field; values given here
/// override the config file, which overrides per-architecture defaults.
#[derive(Args, Debug, Clone)]
pub struct TrainOverrides {
    /// TOML file with training settings
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Total planned epochs, counted from epoch 0 even when resuming
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// Epochs between rate decays; 0 derives thirds of the epoch budget
    #[arg(long)]
    pub lr_step: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Overrides every dropout rate in the network description
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Pose loss weight
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Network description file; omitted, the built-in default is used
    #[arg(long)]
    pub net: Option<PathBuf>,
    /// base, inject_top, or inject_multi; required unless resuming
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub train_data: PathBuf,
    #[arg(long)]
    pub test_data: PathBuf,
    /// f32 or f64
    #[arg(long)]
    pub precision: Option<String>,
    /// Continue from a checkpoint; architecture, description, and settings
    /// come from the file, flags still override settings
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Description file the checkpoint must match, verified by hash
    #[arg(long)]
    pub net: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TransplantArgs {
    /// Donor checkpoint
    #[arg(long)]
    pub from: PathBuf,
    /// Recipient architecture: base, inject_top, or inject_multi
    #[arg(long)]
    pub arch: String,
    /// Which donor partitions to keep: all or shared
    #[arg(long)]
    pub keep: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub batches: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Pose loss weight for the joint pass; defaults to the checkpoint's
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct WarmstartArgs {
    /// Donor checkpoint; its architecture must match the direction's source
    #[arg(long)]
    pub donor: PathBuf,
    /// base-to-multi or multi-to-base
    #[arg(long)]
    pub direction: String,
    #[arg(long)]
    pub train_data: PathBuf,
    #[arg(long)]
    pub test_data: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// decouple, rf, or embed
    #[arg(long)]
    pub which: String,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// decouple: comma-separated activation nodes to profile
    #[arg(long)]
    pub nodes: Option<String>,
    /// rf, embed: the activation node to read
    #[arg(long)]
    pub node: Option<String>,
    /// rf: images averaged per unit
    #[arg(long)]
    pub k: Option<usize>,
    /// rf: number of units rendered, from unit 0
    #[arg(long)]
    pub units: Option<usize>,
    /// rf: tiles per row in the grid image
    #[arg(long)]
    pub cols: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("WW_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("WW_THREADS must be a positive integer, got {raw:?}")))?;
    // A second build_global in the same process is harmless; rendering only
    // cares that some pool exists.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Prune(a) => commands::prune(a),
        Command::Transplant(a) => commands::transplant(a),
        Command::Probe(a) => commands::probe(a),
        Command::Warmstart(a) => commands::warmstart(a),
        Command::Analyze(a) => commands::analyze(a),
    }
}

/// Errors print as exactly one line, whatever the underlying source did.
fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(e.code())
        }
    }
}
