//! `dafrcnn`: dataset generation, training, evaluation and analysis charts.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand};

mod commands;
mod config;
mod jobs;
mod sidecar;

/// Usage errors exit 1, runtime failures exit 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

/// Runtime failure from any library error.
pub fn runtime<E: std::fmt::Display>(context: &str) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

#[derive(Parser, Debug)]
#[command(name = "dafrcnn", version, about = "Domain-adaptive Faster R-CNN on synthetic ShapeWorld scenes")]
pub struct Cli {
    /// TOML run configuration with [data], [train], [detector] and [eval] sections.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lambda=0.2`; repeatable, applied in order.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a ShapeWorld dataset (.shpw plus manifest).
    GenData(GenDataArgs),
    /// Train a detector with the selected adaptation terms.
    Train(TrainArgs),
    /// Per-class AP and mAP of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train and evaluate the five ablation rows and write the table.
    Ablation(AblationArgs),
    /// Split top-ranked detections into correct, mislocalized and background.
    AnalyzeErrors(AnalyzeArgs),
    /// mAP of each model on the target set resized to several scales.
    ScaleSweep(SweepArgs),
    /// Mean best overlap of the top proposals with ground truth.
    ProposalQuality(ProposalArgs),
    /// Domain divergence estimate from pooled backbone features.
    Divergence(DivergenceArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output dataset path; the manifest goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Shift kind: none, style, fog or scale [config: data.shift.kind].
    #[arg(long)]
    pub shift: Option<String>,
    /// Shift intensity in [0, 1] [config: data.shift.intensity].
    #[arg(long)]
    pub intensity: Option<f64>,
    /// Scale factor for the scale shift [config: data.shift.scale_factor].
    #[arg(long)]
    pub scale_factor: Option<f64>,
    /// Rendering seed [config: data.seed].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of images [config: data.num_images].
    #[arg(long)]
    pub num_images: Option<u64>,
    /// Image side in pixels [config: data.image_size].
    #[arg(long)]
    pub image_size: Option<u64>,
    /// Domain label: source or target [config: data.domain].
    #[arg(long)]
    pub domain: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Labeled source dataset.
    #[arg(long)]
    pub source: PathBuf,
    /// Target dataset; its labels are never read.
    #[arg(long)]
    pub target: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Adaptation terms as a comma list of img, ins, cst; "" is the baseline [config: train.ablation].
    #[arg(long)]
    pub ablation: Option<String>,
    /// Weight on the adaptation terms [config: train.lambda].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Total iterations [config: train.total_iters].
    #[arg(long)]
    pub iters: Option<u64>,
    /// Iteration of the learning-rate drop [config: train.lr_drop_iter].
    #[arg(long)]
    pub lr_drop: Option<u64>,
    /// Training seed [config: train.seed].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Metrics CSV [default: <out>.metrics.csv].
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Continue from this checkpoint, appending to the metrics CSV.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Save and stop once this many iterations are done; --resume continues the run.
    #[arg(long)]
    pub stop_at: Option<usize>,
    /// Dataset for snapshots every train.eval_every iterations, written to <out>.evals.csv.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report JSON; the table always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Expected adaptation terms; a checkpoint trained otherwise draws a warning.
    #[arg(long)]
    pub ablation: Option<String>,
}

#[derive(Args, Debug)]
pub struct AblationArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Labeled target-domain evaluation set.
    #[arg(long)]
    pub eval: PathBuf,
    /// Output directory for checkpoints, logs and the table.
    #[arg(long)]
    pub out: PathBuf,
    /// Weight on the adaptation terms [config: train.lambda].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Total iterations [config: train.total_iters].
    #[arg(long)]
    pub iters: Option<u64>,
    /// Iteration of the learning-rate drop [config: train.lr_drop_iter].
    #[arg(long)]
    pub lr_drop: Option<u64>,
    /// Training seed [config: train.seed].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Model as NAME=CHECKPOINT (or a path, named by its stem); repeatable.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for errors.csv and errors.svg.
    #[arg(long)]
    pub out: PathBuf,
    /// Top-ranked detections examined [config: eval.top_r].
    #[arg(long)]
    pub top_r: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Model as NAME=CHECKPOINT (or a path, named by its stem); repeatable.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    /// Labeled target set at the reference scale.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for sweep.csv and sweep.svg.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated scale factors [config: eval.scales].
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct ProposalArgs {
    /// Model as NAME=CHECKPOINT (or a path, named by its stem); repeatable.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Proposals per image [config: eval.top_p].
    #[arg(long)]
    pub top_p: Option<u64>,
}

#[derive(Args, Debug)]
pub struct DivergenceArgs {
    /// Saved features JSON ({"source": [[..]], "target": [[..]]}).
    #[arg(long, conflicts_with_all = ["checkpoint", "source", "target", "init"])]
    pub features: Option<PathBuf>,
    /// Extract features with this checkpoint.
    #[arg(long, conflicts_with = "init")]
    pub checkpoint: Option<PathBuf>,
    /// Extract features with freshly initialized weights (seed train.seed).
    #[arg(long)]
    pub init: bool,
    #[arg(long, requires = "target")]
    pub source: Option<PathBuf>,
    #[arg(long, requires = "source")]
    pub target: Option<PathBuf>,
    /// Write the extracted features here.
    #[arg(long)]
    pub save_features: Option<PathBuf>,
    /// Estimate JSON.
    #[arg(long)]
    pub out: PathBuf,
}

fn command_with_defaults() -> clap::Command {
    let help = config::defaults_help();
    Cli::command().after_help(help.clone()).mut_subcommands(|s| s.after_help(help.clone()))
}

fn parse(args: Vec<String>) -> Result<Cli, clap::Error> {
    let matches = command_with_defaults().try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

fn main() -> ExitCode {
    let cli = match parse(std::env::args().collect()) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            eprintln!("\nFor more information, try '--help'.");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
