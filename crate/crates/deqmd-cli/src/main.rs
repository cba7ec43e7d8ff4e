//! `deqmd`: simulate, train, reconstruct, evaluate and benchmark Poisson
//! deblurring experiments driven by a single flat config file.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deqmd::config::ExperimentConfig;
use deqmd::harness;

#[derive(Parser)]
#[command(
    name = "deqmd",
    about = "Poisson image deblurring by mirror descent with learned equilibrium regularizers",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (flat `key = value` text).
    #[arg(long)]
    config: PathBuf,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate blurred, Poisson-corrupted observations and a replay manifest.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Train the configured learnable regularizer end to end.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Reconstruct the test split (learnable kinds need a checkpoint and
    /// expose no tuning flags).
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Parameter checkpoint (.deqp) for learnable regularizers.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Reconstruct and score the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Parameter checkpoint (.deqp) for learnable regularizers.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare methods (observed, RL, KL+TV, trained equilibrium models).
    Benchmark {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, deqmd::Error> {
    Ok(ExperimentConfig::from_file(&common.config)?
        .with_overrides(common.out.clone(), common.seed))
}

fn run() -> Result<(), deqmd::Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { common } => {
            let cfg = load_config(&common)?;
            let rows = harness::cmd_simulate(&cfg)?;
            println!(
                "simulated {} pairs into {}",
                rows.len(),
                cfg.out_dir.display()
            );
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let out = harness::cmd_train(&cfg)?;
            let last = out.log.rows.last();
            println!(
                "trained {} epochs; best val PSNR {:.2} dB; checkpoint at {}",
                out.log.rows.len(),
                out.log.best_val_psnr(),
                out.checkpoint_path.display()
            );
            if let Some(row) = last {
                println!(
                    "final epoch: loss {:.4e}, val PSNR {:.2} dB, {:.1} forward iters/sample",
                    row.train_loss, row.val_psnr, row.mean_fp_iters
                );
            }
        }
        Command::Reconstruct { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let recons = harness::cmd_reconstruct(&cfg, checkpoint.as_deref())?;
            for r in &recons {
                println!(
                    "recon_{:03}: {} iterations, converged = {}",
                    r.index,
                    r.report.iterations(),
                    r.report.converged
                );
            }
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let out = harness::cmd_evaluate(&cfg, checkpoint.as_deref())?;
            println!(
                "{}: PSNR {:.2} dB, SSIM {:.4}, {:.1} iters ({:.1}s)",
                out.summary.method,
                out.summary.psnr,
                out.summary.ssim,
                out.summary.iterations,
                out.summary.seconds
            );
        }
        Command::Benchmark { common } => {
            let cfg = load_config(&common)?;
            let out = harness::cmd_benchmark(&cfg)?;
            println!("{:<10} {:>8} {:>8} {:>10} {:>8}", "method", "psnr", "ssim", "iters", "secs");
            for r in &out.rows {
                println!(
                    "{:<10} {:>8.2} {:>8.4} {:>10.1} {:>8.1}",
                    r.method, r.psnr, r.ssim, r.iterations, r.seconds
                );
            }
            if !out.init_study.is_empty() {
                println!("\ninitialization study (mean over test set):");
                for (name, psnr, iters) in &out.init_study {
                    println!("{name:<10} PSNR {psnr:>6.2} dB, {iters:>7.1} iterations");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
