//! `disarm`: simulate phantom cohorts, train a harmonization model, apply
//! it, and evaluate or analyse the results.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::Mode;

#[derive(Debug, Parser)]
#[command(name = "disarm", version, about = "Scanner harmonization of 3D MR volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config file and DISARM_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom cohort imaged under several simulated scanners.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Use the first N configured scanners.
        #[arg(long)]
        scanners: Option<usize>,
        /// Subjects per scanner.
        #[arg(long)]
        subjects: Option<usize>,
        /// Subjects per scanner assigned to the test split.
        #[arg(long)]
        test_subjects: Option<usize>,
        /// Write into a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on the training split of a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Manifest CSV (`path,scanner_id,subject_id,split`).
        #[arg(long, short)]
        manifest: PathBuf,
        /// Total iterations, including any already completed on resume.
        #[arg(long)]
        iterations: Option<u64>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Harmonize volumes with a trained model.
    Harmonize {
        #[command(flatten)]
        common: Common,
        /// Trained model bundle.
        #[arg(long, short)]
        model: PathBuf,
        /// Inference mode; defaults to the config (scanner-free).
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Target scanner for reference mode.
        #[arg(long = "ref", required_if_eq("mode", "reference"))]
        reference: Option<usize>,
        /// Harmonize every volume of this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Restrict the manifest to one split (train or test).
        #[arg(long)]
        split: Option<String>,
        /// Individual volume files.
        inputs: Vec<PathBuf>,
    },
    /// Compare scanner groups before and after harmonization.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Manifest of the original volumes.
        #[arg(long)]
        before: PathBuf,
        /// Manifest of the harmonized volumes.
        #[arg(long)]
        after: PathBuf,
        /// Also write heatmap and density PNGs.
        #[arg(long)]
        plots: bool,
    },
    /// Downstream statistics on a feature table.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Feature CSV (for `classify`: `path,label` rows).
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum)]
        task: commands::Task,
        /// Feature columns; defaults to every column not used as age, group or label.
        #[arg(long, value_delimiter = ',')]
        columns: Vec<String>,
    },
    /// Render PNG plots from an evaluation report or a training log.
    Plot {
        #[command(flatten)]
        common: Common,
        /// evaluation.json written by `evaluate`.
        #[arg(long, required_unless_present = "log")]
        report: Option<PathBuf>,
        /// train_log.csv written by `train`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = commands::run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
