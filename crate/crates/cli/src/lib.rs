//! Library half of the `qtune` binary, kept separate so commands are testable.

pub mod commands;
pub mod config;
pub mod plot;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use qtune_core::trainer::TrainMode;

use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "qtune", version, about = "Learned JPEG quantization tables trained with a classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train in alternating, joint or baseline mode.
    Train,
    /// One training run per λ (or c) value, plus a rate-accuracy CSV and plot.
    Sweep,
    /// Measure entropy-coded size of the validation split.
    Rate,
    /// Compress and reconstruct images, reporting PSNR/SSIM/bits.
    Encode {
        /// Image files or directories.
        inputs: Vec<PathBuf>,
    },
    /// Write integer Q-tables from a checkpoint.
    Export,
    /// Load a dataset and report its size.
    IngestCheck,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Alternating,
    Joint,
    Baseline,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Alternating => TrainMode::Alternating,
            ModeArg::Joint => TrainMode::Joint,
            ModeArg::Baseline => TrainMode::Baseline,
        }
    }
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    /// λ; comma-separated list for `sweep`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub lambda: Vec<f64>,
    #[arg(long, global = true)]
    pub lambda1: Option<f64>,
    /// Hinge threshold c; comma-separated list for `sweep`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub c: Vec<f64>,
    /// Standard-table quality (1–100).
    #[arg(long, global = true)]
    pub quality: Option<f64>,
    /// `synthetic`, a CIFAR binary file/directory, or an image folder.
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    /// Keep this many training images (seeded).
    #[arg(long, global = true)]
    pub subset: Option<usize>,
    /// Checkpoint to resume from (`train`) or read kernels from.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Exported Q-table JSON to read kernels from.
    #[arg(long, global = true)]
    pub qtables: Option<PathBuf>,
}

/// Config file (if any) merged with the flags.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let c = &cli.common;
    let o = Overrides {
        seed: c.seed,
        out: c.out.clone(),
        mode: c.mode.map(Into::into),
        lambda: c.lambda.clone(),
        lambda1: c.lambda1,
        c: c.c.clone(),
        quality: c.quality,
        dataset: c.dataset.clone(),
        subset: c.subset,
        checkpoint: c.checkpoint.clone(),
        qtables: c.qtables.clone(),
        inputs: match &cli.command {
            Command::Encode { inputs } => inputs.clone(),
            _ => Vec::new(),
        },
    };
    cfg.apply(&o, matches!(cli.command, Command::Sweep))?;
    Ok(cfg)
}

/// Runs the parsed command, printing a short report to stdout.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    let out = cfg.out.clone();
    match cli.command {
        Command::Train => {
            let s = commands::cmd_train(cfg)?;
            println!(
                "accuracy {:.4}  mean {:.4} KB/image  PSNR {:.2} dB  SSIM {:.4}  -> {}",
                s.accuracy,
                s.mean_kb,
                s.psnr,
                s.ssim,
                out.display()
            );
        }
        Command::Sweep => {
            for r in commands::cmd_sweep(cfg)? {
                println!("lambda {:e}  c {:e}  {:.4} KB  acc {:.4}", r.lambda, r.c, r.mean_kb, r.accuracy);
            }
        }
        Command::Rate => {
            let r = commands::cmd_rate(cfg)?;
            println!("{} images  mean {:.4} KB  median {:.4} KB", r.images.len(), r.mean_kb(), r.median_kb());
        }
        Command::Encode { .. } => {
            let rows = commands::cmd_encode(cfg)?;
            println!("{} images written to {}", rows.len(), out.display());
        }
        Command::Export => {
            let ex = commands::cmd_export(cfg)?;
            print!("{}", commands::table_text("Y", &ex.y_qtable.0));
            print!("{}", commands::table_text("Cb", &ex.cb_qtable.0));
            print!("{}", commands::table_text("Cr", &ex.cr_qtable.0));
        }
        Command::IngestCheck => {
            let r = commands::cmd_ingest_check(cfg)?;
            println!(
                "{} train / {} test images, {} classes, {}x{}",
                r.train_images, r.test_images, r.classes, r.width, r.height
            );
        }
    }
    Ok(())
}
