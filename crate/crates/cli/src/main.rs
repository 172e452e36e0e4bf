//! `pixdec`: train, evaluate and inspect the toy mask decoder.
//!
//! Exit codes: 0 success, 2 configuration error, 3 scoring-service error,
//! 4 malformed data, 1 anything else.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "pixdec", version, about = "Multi-scale pixel decoder toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for data generation and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Config override as `dotted.path=json`, e.g. `loss.lambda_ref=0`. Repeatable.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScorerMode {
    StubConst,
    StubExact,
    StubJaccard,
    Remote,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on synthetic scenes (or configured record files) and write a checkpoint.
    Train {
        /// Shorthand for `--set loss.lambda_ref=VALUE`.
        #[arg(long)]
        lambda_ref: Option<f64>,
        /// Shorthand for `--set optim.steps=VALUE`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score predictions against ground truth and report gIoU/cIoU per split.
    Eval {
        /// Checkpoint directory whose model produces the predictions.
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Prediction records (same format as the data), matched by image name.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Ground-truth records; defaults to the held-out synthetic scenes.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ScorerMode::StubExact)]
        scorer_mode: ScorerMode,
        #[arg(long, env = "SCORER_ENDPOINT")]
        scorer_endpoint: Option<String>,
        /// Raw score returned by `stub-const`.
        #[arg(long, default_value_t = 10)]
        stub_score: u32,
        /// Use `stub-exact` scores when the remote scorer cannot be reached.
        #[arg(long)]
        stub_fallback: bool,
        /// Seconds before a remote scoring request is abandoned.
        #[arg(long, default_value_t = 30)]
        scorer_timeout: u64,
        /// Multiply intersections by the score instead of gating at 0.5.
        #[arg(long)]
        soft_product: bool,
    },
    /// Turn per-instance annotations into multi-target records.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        k_min: usize,
        #[arg(long, default_value_t = 3)]
        k_max: usize,
    },
    /// Drop records that break the record invariants or the given rules.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_mask_area: u64,
    },
    /// Histograms of categories, description lengths and target counts.
    Stats {
        #[arg(long)]
        input: PathBuf,
        /// Also write a gnuplot-friendly histogram dump here.
        #[arg(long)]
        gnuplot: Option<PathBuf>,
    },
    /// Decoder mul-add count, closed form and measured.
    Flops {
        /// Targets decoded per image.
        #[arg(long, default_value_t = 1)]
        targets: usize,
        /// Evaluate at this square input size instead of the configured one.
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Render synthetic scenes to PNG plus a record file.
    Gen {
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
