//! `fprnet`: corpus generation, pretraining, two-stage training, inference,
//! evaluation, and ranking, all driven by one config file.

mod config;
mod error;
mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use error::CliError;
use fprnet_core::trainer::ModuleKind;
use pipeline::Split;

#[derive(Parser)]
#[command(
    name = "fprnet",
    version,
    about = "Two-stage PET/CT lesion segmentation pipeline"
)]
struct Cli {
    /// Pipeline config file; defaults to fprnet.toml when present, else
    /// built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Config override, repeatable: --set train.seed=7
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic PET/CT corpus with ground truth.
    Phantom,
    /// Contrastive encoder pretraining on the training split.
    Pretrain,
    /// Train the first-stage (global) segmenter.
    TrainGsm,
    /// Train the second-stage (refinement) network; needs a first-stage
    /// checkpoint.
    TrainLrm,
    /// Run the trained cascade and write probability and mask volumes.
    Infer {
        #[arg(long, value_enum, default_value_t = Split::All)]
        studies: Split,
    },
    /// Score predicted masks against ground truth.
    Evaluate {
        #[arg(long, value_enum, default_value_t = Split::All)]
        studies: Split,
        /// Directory of predicted masks; defaults to <output_dir>/predictions.
        #[arg(long)]
        pred_dir: Option<PathBuf>,
    },
    /// Rank submissions given their per-study metric tables.
    Rank {
        /// Metric CSV files, one per submission; the file stem is the
        /// submission id.
        #[arg(required = true, num_args = 2..)]
        submissions: Vec<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error ({}): {e}", e.category());
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = match cli.config {
        Some(p) => Some(p),
        None => {
            let default = PathBuf::from("fprnet.toml");
            default.exists().then_some(default)
        }
    };
    let cfg = config::load(path.as_deref(), &cli.overrides)?;
    let hash = config::config_hash(&cfg);

    match cli.command {
        Command::Phantom => pipeline::cmd_phantom(&cfg, &hash),
        Command::Pretrain => pipeline::cmd_pretrain(&cfg, &hash),
        Command::TrainGsm => pipeline::cmd_train(&cfg, &hash, ModuleKind::Gsm),
        Command::TrainLrm => pipeline::cmd_train(&cfg, &hash, ModuleKind::Lrm),
        Command::Infer { studies } => pipeline::cmd_infer(&cfg, &hash, studies),
        Command::Evaluate { studies, pred_dir } => {
            pipeline::cmd_evaluate(&cfg, &hash, studies, pred_dir.as_deref())
        }
        Command::Rank { submissions } => pipeline::cmd_rank(&cfg, &hash, &submissions),
    }
}
