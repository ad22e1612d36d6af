//! `wsod`: box mining, memory-transfer fusion, toy training, inference and
//! VOC evaluation over JSON files.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "wsod", version, about = "Weakly supervised detection refinement toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mine a supervision box per positive class from proposal scores.
    Mine(MineArgs),
    /// Fuse score matrices of earlier stages into supervision scores.
    Fuse(FuseArgs),
    /// Generate synthetic scenes with salient object parts.
    Simulate(SimulateArgs),
    /// Train the refinement pipeline on proposal bags.
    TrainToy(TrainArgs),
    /// Detect objects with a trained state.
    Infer(InferArgs),
    /// Score detections against ground truth (AP and CorLoc).
    Eval(EvalArgs),
    /// Per-image, per-class non-maximum suppression of a detections file.
    Nms(NmsArgs),
    /// Label proposals from supervision boxes.
    Assign(AssignArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SizeWeight {
    Uniform,
    Area,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ApModeArg {
    Voc07,
    Area,
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("{s:?} is not a positive integer")),
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(v),
        _ => Err(format!("{s:?} is not a finite non-negative number")),
    }
}

/// `off` or a threshold in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
struct IouIgn(Option<f64>);

fn iou_ign(s: &str) -> Result<IouIgn, String> {
    if s.eq_ignore_ascii_case("off") {
        Ok(IouIgn(None))
    } else {
        unit_interval(s).map(|v| IouIgn(Some(v)))
    }
}

/// Flags shared by every command that builds a pipeline configuration.
/// Precedence: built-in defaults, then `--config`, then explicit flags.
#[derive(Args, Debug, Default, Clone)]
struct PipelineFlags {
    /// JSON file with pipeline configuration fields (partial allowed)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cluster IoU threshold for box mining [default: 0.3]
    #[arg(long, value_parser = unit_interval)]
    gamma1: Option<f64>,
    /// Pseudo-label IoU threshold [default: 0.5]
    #[arg(long, value_parser = unit_interval)]
    gamma2: Option<f64>,
    /// Number of box-mining clusters [default: 3]
    #[arg(long, value_parser = positive_usize)]
    q: Option<usize>,
    /// Recency bias of memory-transfer weights [default: 0.1]
    #[arg(long, value_parser = non_negative)]
    delta: Option<f64>,
    /// Refinement stages per block [default: 3]
    #[arg(long, value_parser = positive_usize)]
    k_stages: Option<usize>,
    /// NMS IoU threshold at inference [default: 0.3]
    #[arg(long, value_parser = unit_interval)]
    nms_threshold: Option<f64>,
    /// Weighting of created boxes in mining [default: area]
    #[arg(long, value_enum)]
    size_weight: Option<SizeWeight>,
    /// Ignore band lower bound, or `off` [default: off]
    #[arg(long, value_parser = iou_ign)]
    iou_ign: Option<IouIgn>,
    /// Random seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct MineArgs {
    /// Score matrices, one per image
    #[arg(long)]
    scores: PathBuf,
    /// Proposal bags supplying boxes and image labels
    #[arg(long)]
    bags: PathBuf,
    /// Mined boxes output
    #[arg(long)]
    out: PathBuf,
    /// Optional full mining trace output
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Score files of stages 1..k-1, oldest first
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Recency bias of the weights [default: 0.1]
    #[arg(long, value_parser = non_negative, default_value_t = 0.1, hide_default_value = true)]
    delta: f64,
    /// Fused scores output
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Number of scenes [default: 40]
    #[arg(long, default_value_t = 40, hide_default_value = true)]
    count: usize,
    /// Random seed [default: 0]
    #[arg(long, default_value_t = 0, hide_default_value = true)]
    seed: u64,
    /// JSON file with generator fields (partial allowed)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of classes [default: 2]
    #[arg(long, value_parser = positive_usize)]
    num_classes: Option<usize>,
    /// Maximum instances per present class [default: 2]
    #[arg(long, value_parser = positive_usize)]
    max_objects: Option<usize>,
    /// Area fraction of the salient corner [default: 0.3]
    #[arg(long)]
    salient_fraction: Option<f64>,
    /// Feature weight of salient overlap [default: 3]
    #[arg(long, value_parser = non_negative)]
    salience_boost: Option<f64>,
    /// Proposals per image [default: 48]
    #[arg(long, value_parser = positive_usize)]
    num_proposals: Option<usize>,
    /// Feature dimension [default: 32]
    #[arg(long, value_parser = positive_usize)]
    feature_dim: Option<usize>,
    /// Feature noise std [default: 0.05]
    #[arg(long, value_parser = non_negative)]
    noise: Option<f64>,
    /// Proposal bags output
    #[arg(long)]
    out_bags: PathBuf,
    /// Ground-truth output
    #[arg(long)]
    out_gt: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Proposal bags for training
    #[arg(long)]
    bags: PathBuf,
    /// Trained state output
    #[arg(long)]
    out: PathBuf,
    /// Loss log, one JSON record per iteration
    #[arg(long)]
    log: Option<PathBuf>,
    /// SGD iterations [default: 200]
    #[arg(long)]
    iterations: Option<usize>,
    /// Initial learning rate [default: 0.01]
    #[arg(long, value_parser = non_negative)]
    learning_rate: Option<f64>,
    /// Momentum [default: 0.9]
    #[arg(long, value_parser = unit_interval)]
    momentum: Option<f64>,
    /// Images per step [default: 2]
    #[arg(long, value_parser = positive_usize)]
    batch_size: Option<usize>,
    /// Disable box mining (top-1 supervision in the second block)
    #[arg(long)]
    no_bbm: bool,
    /// Disable memory transfer (each stage supervised by the previous one)
    #[arg(long)]
    no_mtr: bool,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Proposal bags to score
    #[arg(long)]
    bags: PathBuf,
    /// State written by train-toy
    #[arg(long)]
    state: PathBuf,
    /// Detections output
    #[arg(long)]
    out: PathBuf,
    /// NMS IoU threshold [default: value stored in the state, 0.3]
    #[arg(long, value_parser = unit_interval)]
    nms_threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Detections file
    #[arg(long)]
    detections: PathBuf,
    /// Ground-truth JSON file
    #[arg(long)]
    gt: PathBuf,
    /// JSON report output
    #[arg(long)]
    out: Option<PathBuf>,
    /// Positive IoU threshold [default: 0.5]
    #[arg(long, value_parser = unit_interval, default_value_t = 0.5, hide_default_value = true)]
    iou: f64,
    /// AP summary [default: voc07]
    #[arg(long, value_enum, default_value_t = ApModeArg::Voc07, hide_default_value = true)]
    mode: ApModeArg,
    /// Number of classes [default: inferred from files]
    #[arg(long)]
    num_classes: Option<usize>,
    /// Comma separated class names for the table
    #[arg(long, value_delimiter = ',')]
    class_names: Option<Vec<String>>,
}

#[derive(Args, Debug)]
struct NmsArgs {
    /// Detections file
    #[arg(long)]
    detections: PathBuf,
    /// Suppressed detections output
    #[arg(long)]
    out: PathBuf,
    /// Suppress boxes with IoU above this [default: 0.3]
    #[arg(long, value_parser = unit_interval, default_value_t = 0.3, hide_default_value = true)]
    nms_threshold: f64,
}

#[derive(Args, Debug)]
struct AssignArgs {
    /// Proposal bags to label
    #[arg(long)]
    bags: PathBuf,
    /// Supervision boxes: {"images": [{"id", "boxes": [{"class", "box"}]}]}
    #[arg(long)]
    supervision: PathBuf,
    /// Proposal labels output
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    pipeline: PipelineFlags,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<wsod_core::Error> for CliError {
    fn from(e: wsod_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Mine(a) => commands::mine(a),
        Command::Fuse(a) => commands::fuse(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::TrainToy(a) => commands::train_toy(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Nms(a) => commands::nms(a),
        Command::Assign(a) => commands::assign(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
