use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dbgc_core::pipeline::{run_stage, PipelineConfig, Stage};

/// Dual-branch superpixel/pixel PolSAR land-cover classifier.
#[derive(Debug, Parser)]
#[command(name = "dbgc", version)]
struct Cli {
    /// JSON pipeline configuration; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides DBGC_OUT and the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Fusion weight of the superpixel branch.
    #[arg(long, global = true)]
    alpha: Option<f64>,

    /// Epochs for the training stage being run.
    #[arg(long, global = true)]
    epochs: Option<usize>,

    /// Requested superpixel count.
    #[arg(long = "k-target", global = true)]
    k_target: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load or synthesize the image, extract features and draw the label split.
    Prepare,
    /// Run SLIC and build the superpixel graph.
    Segment,
    /// Pretrain the graph autoencoder.
    Pretrain,
    /// Train the pixel branch and classifier head.
    Train,
    /// Predict every pixel and score the held-out labels.
    Evaluate,
    /// All of the above, in order.
    RunAll,
}

impl Command {
    fn stage(&self) -> Stage {
        match self {
            Command::Prepare => Stage::Prepare,
            Command::Segment => Stage::Segment,
            Command::Pretrain => Stage::Pretrain,
            Command::Train => Stage::Train,
            Command::Evaluate => Stage::Evaluate,
            Command::RunAll => Stage::RunAll,
        }
    }
}

fn build_config(cli: &Cli) -> dbgc_core::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None => PipelineConfig::default(),
    };
    cfg.resolve_output(cli.out.clone());
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(alpha) = cli.alpha {
        cfg.fusion.alpha = alpha;
    }
    if let Some(k) = cli.k_target {
        cfg.superpixel.k_target = Some(k);
    }
    if let Some(epochs) = cli.epochs {
        let stage = cli.command.stage();
        if matches!(stage, Stage::Pretrain | Stage::RunAll) {
            cfg.graphmae.epochs = epochs;
        }
        if matches!(stage, Stage::Train | Stage::RunAll) {
            cfg.fusion.epochs = epochs;
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = build_config(&cli).and_then(|cfg| run_stage(cli.command.stage(), &cfg).map(|m| (cfg, m)));
    match result {
        Ok((cfg, manifest)) => {
            log::info!(
                "{} artifacts recorded in {}",
                manifest.artifacts.len(),
                cfg.output.join(dbgc_core::pipeline::MANIFEST_FILE).display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}: {e}", e.name());
            ExitCode::FAILURE
        }
    }
}
