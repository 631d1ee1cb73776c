//! Command-line harness: data generation, teacher training, distillation,
//! sampling, evaluation and weight-difference transfer.
//!
//! Every command reads an optional JSON [`RunConfig`]; flags override its
//! fields. All randomness derives from the run seed.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "perflow", version, about = "Piecewise rectified flow experiments on synthetic data")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training steps, or total inference steps when sampling.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelSource {
    /// Distilled student checkpoint.
    #[arg(long, conflicts_with_all = ["base", "teacher"])]
    pub student: Option<PathBuf>,
    /// Teacher (or fine-tuned teacher) the delta is applied to.
    #[arg(long, requires = "delta", conflicts_with = "teacher")]
    pub base: Option<PathBuf>,
    /// Weight difference produced by `delta-w`.
    #[arg(long, requires = "base")]
    pub delta: Option<PathBuf>,
    /// Sample the teacher itself with uniform DDIM steps.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw the configured dataset into a JSONL file.
    MakeData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        /// Translate the mixture by the configured fine-tuning offset.
        #[arg(long)]
        shifted: bool,
    },
    /// Train a neural teacher by denoising regression.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Continue training a teacher on a customized dataset.
    FinetuneTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        /// Defaults to the configured data translated by the fine-tuning offset.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Distill a teacher into a piecewise flow student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Generate samples from a student, a base plus delta, or a teacher.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: ModelSource,
        #[arg(long)]
        n: Option<usize>,
        /// Guidance scales per window, noisiest first, e.g. "7.5,4,4,4".
        #[arg(long)]
        cfg_schedule: Option<String>,
        #[arg(long)]
        label: Option<usize>,
    },
    /// Score samples against reference data.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: PathBuf,
        /// Defaults to a fresh draw of the configured dataset.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Student whose per-window straightness is reported.
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Write `theta - phi` as a delta checkpoint.
    DeltaW {
        #[arg(long)]
        theta: PathBuf,
        #[arg(long)]
        phi: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write sampling trajectories as JSONL.
    ExportTraj {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: ModelSource,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        cfg_schedule: Option<String>,
        #[arg(long)]
        label: Option<usize>,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                perflow::Error::Config(_) | perflow::Error::Argument(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}
