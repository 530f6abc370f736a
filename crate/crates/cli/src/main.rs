//! `ghosthead` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ghosthead::model::Variant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error(transparent)]
    Core(#[from] ghosthead::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Failed(_) => "failed",
            CliError::Core(e) => e.kind(),
        }
    }

    /// 2 for usage and configuration mistakes, 1 for everything else.
    fn exit_code(&self) -> u8 {
        use ghosthead::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::Config(_) | E::Parse { .. } | E::InvalidParameter(_)) => 2,
            CliError::Failed(_) | CliError::Core(_) => 1,
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "ghosthead",
    version,
    about = "GhostHead detector: inspection, inference, evaluation and toy training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Baseline,
    Ghosthead,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::Ghosthead => Variant::Ghosthead,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchVariant {
    Baseline,
    Ghosthead,
    Both,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Model config (JSON); the built-in YOLOv11n layout when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ghosthead")]
    pub variant: VariantArg,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-layer parameter and FLOP ledger.
    Summary {
        #[command(flatten)]
        model: ModelArgs,
        /// Square input size.
        #[arg(long, default_value_t = 640)]
        size: usize,
        /// Also write the ledger as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Writes freshly initialized weights.
    Init {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detects objects in one PPM image.
    Infer {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        #[arg(long, default_value_t = 0.45)]
        iou: f64,
        #[arg(long, default_value_t = 640)]
        size: usize,
        /// Detections file, one line per box.
        #[arg(long)]
        out: PathBuf,
        /// Optional PPM copy of the image with boxes drawn.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// mAP@0.5 evaluation over a manifest.
    Eval {
        /// Not needed with `--ground-truth`.
        #[arg(long, required_unless_present = "ground_truth")]
        weights: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.001)]
        conf: f64,
        #[arg(long, default_value_t = 0.7)]
        iou: f64,
        #[arg(long, default_value_t = 640)]
        size: usize,
        /// Use the labels themselves as detections (pipeline self-check).
        #[arg(long)]
        ground_truth: bool,
    },
    /// Single-image forward latency and analytic GFLOPs.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "ghosthead")]
        variant: BenchVariant,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 640)]
        size: usize,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, conflicts_with = "all", required_unless_present = "all")]
        block: Option<String>,
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Trains on a seeded synthetic set and saves the loss log and weights.
    TrainToy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, value_enum, default_value = "ghosthead")]
        variant: VariantArg,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 100)]
        eval_every: usize,
    },
    /// Converts VisDrone annotations to normalized labels and a manifest.
    ConvertVisdrone {
        /// Directory with `images/*.ppm` and `annotations/*.txt`.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes a seeded synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 640)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_threads() -> CliResult {
    let Ok(v) = std::env::var("GHOST_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("GHOST_THREADS must be a positive integer, got `{v}`")))?;
    // Fails only if a pool already exists, which is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    init_threads()?;
    use commands::*;
    match cli.command {
        Command::Summary { model, size, csv } => summary(&model, size, csv.as_deref()),
        Command::Init { model, seed, out } => init(&model, seed, &out),
        Command::Infer { weights, image, config, conf, iou, size, out, overlay } => {
            infer(&weights, &image, config.as_deref(), conf, iou, size, &out, overlay.as_deref())
        }
        Command::Eval { weights, manifest, out_dir, config, conf, iou, size, ground_truth } => {
            let source = if ground_truth {
                EvalSource::GroundTruth
            } else {
                EvalSource::Weights(weights.expect("required by clap"))
            };
            eval(source, &manifest, &out_dir, config.as_deref(), conf, iou, size)
        }
        Command::Bench { config, variant, iters, warmup, size } => {
            bench(config.as_deref(), variant, iters, warmup, size)
        }
        Command::Gradcheck { block, all, tol, seed } => gradcheck(block.as_deref(), all, tol, seed),
        Command::TrainToy { seed, steps, out, n, size, variant, lr, eval_every } => {
            train_toy(seed, steps, &out, n, size, variant.into(), lr, eval_every)
        }
        Command::ConvertVisdrone { input, out } => convert_visdrone(&input, &out),
        Command::Synth { seed, n, size, out } => synth(seed, n, size, &out),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if e.kind() == clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            eprintln!("error: kind=usage missing subcommand; run with --help for the list");
            return ExitCode::from(2);
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("error: kind=usage {}", one_line(first.trim_start_matches("error:")));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(e.exit_code())
        }
    }
}
