//! prgrad: train and verify product-layer networks. Subcommands cover the
//! gradient-check suite, single config-driven runs, the Fashion-MNIST
//! three-variant ablation, the reduced CIFAR-10 comparison, and standalone
//! angle statistics for a checkpoint.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use prgrad_cli::{ablation, angles, cifar, config, emit, runner};
use prgrad_core::verify;

#[derive(Parser)]
#[command(
    name = "prgrad",
    version,
    about = "Training and verification CLI for P/R/PR product networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the gradient-check suite and write its report CSV.
    Gradcheck {
        /// Report CSV path.
        #[arg(long, default_value = "runs/gradcheck.csv")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Comma-separated product modes.
        #[arg(long, default_value = "P,R,PR,P_LENGTH_ONLY,P_DIRECTION_ONLY")]
        modes: String,
        /// Comma-separated pair dimensions.
        #[arg(long, default_value = "2,3,16,256")]
        dims: String,
    },
    /// Train one run from a JSON config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's product mode.
        #[arg(long)]
        mode: Option<String>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fashion-MNIST ablation: P vs P_DIRECTION_ONLY vs P_LENGTH_ONLY.
    AblationFmnist {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value = "runs/ablation-fmnist")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        /// Optional cap on training examples for reduced-runtime machines.
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Reduced CIFAR-10 run: P vs PR across seeds on the small CNN.
    CifarSmall {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value = "runs/cifar-small")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
    },
    /// Angle statistics for a checkpoint over one evaluation batch.
    AngleStats {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root; defaults to $PRGRAD_DATA_DIR, then ./data.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Optional angles.csv destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_dims(csv: &str) -> Result<Vec<usize>> {
    csv.split(',')
        .map(|s| {
            let d: usize = s.trim().parse()?;
            if d == 0 {
                bail!("dimensions must be positive");
            }
            Ok(d)
        })
        .collect()
}

fn run_gradcheck(out: &Path, seed: u64, modes: &str, dims: &str) -> Result<()> {
    let modes = prgrad_core::product::parse_modes(modes)?;
    let dims = parse_dims(dims)?;
    let reports = verify::gradcheck_suite(seed, &dims, &modes);
    emit::write_gradcheck_reports(out, &reports)?;
    let failed: Vec<&verify::GradCheckReport> = reports.iter().filter(|r| !r.pass).collect();
    println!(
        "{} checks, {} failed; report at {}",
        reports.len(),
        failed.len(),
        out.display()
    );
    for r in &failed {
        println!(
            "FAIL {}/{}: {:.3e} > {:.1e}",
            r.case, r.parameter, r.max_rel_err, r.tolerance
        );
    }
    if !failed.is_empty() {
        bail!("{} gradient checks failed", failed.len());
    }
    Ok(())
}

fn real_main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Gradcheck { out, seed, modes, dims } => run_gradcheck(&out, seed, &modes, &dims)?,
        Cmd::Train { config, mode, seed } => {
            let mut cfg = config::TrainConfig::from_file(&config)?;
            cfg.apply_overrides(mode.as_deref(), seed);
            let out = runner::run(&cfg)?;
            println!(
                "final test accuracy {:.4}; artifacts in {}",
                out.final_test_acc,
                out.out_dir.display()
            );
        }
        Cmd::AblationFmnist { data_dir, out_dir, epochs, subset, seed } => {
            ablation::ablation_fmnist(&data_dir, &out_dir, epochs, subset, seed)?;
        }
        Cmd::CifarSmall { data_dir, seeds, out_dir, epochs } => {
            if seeds == 0 {
                bail!("need at least one seed");
            }
            cifar::cifar_small(&data_dir, &out_dir, seeds, epochs)?;
        }
        Cmd::AngleStats { checkpoint, data_dir, out } => {
            angles::angle_stats_for_checkpoint(&checkpoint, data_dir.as_deref(), out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
