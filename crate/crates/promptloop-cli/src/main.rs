use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(
    name = "promptloop",
    version,
    about = "Build toyworlds, pretrain models, optimize prompts, generate data, and run experiments"
)]
struct Cli {
    /// Flat `key = value` config file with dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. --set optim.lr=0.05 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    /// Output root; defaults to $PROMPTLOOP_OUT, then ./results.
    #[arg(long, global = true)]
    root: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the configured world and save its splits.
    BuildWorld,
    /// Train the denoiser, the joint embedder, and the task model(s).
    Pretrain,
    /// Optimize a prompt bank for the configured method.
    Optimize,
    /// Generate a dataset from a saved prompt bank.
    Generate,
    /// Train a model on the original data plus an optional generated mixture.
    Train,
    /// Run the data-efficiency sweep and emit curve.csv.
    Sweep,
    /// Cross-model transfer table for two architectures.
    Transfer,
    /// Recompute and check every artifact hash in the run manifest.
    Verify,
    /// Render one example's image, mask, or depth map to a PPM/PGM file.
    Render {
        /// Dataset directory (contains index.tsv).
        #[arg(long)]
        data: PathBuf,
        /// Example id within the dataset.
        #[arg(long)]
        id: String,
        /// What to render: image, mask, or depth.
        #[arg(long, default_value = "image")]
        target: String,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::try_parse().unwrap_or_else(|e| {
        let code = match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
            _ => 1,
        };
        let _ = e.print();
        std::process::exit(code);
    });
    if let Err(e) = commands::dispatch(cli) {
        eprintln!("promptloop: {e}");
        std::process::exit(e.exit_code());
    }
}
