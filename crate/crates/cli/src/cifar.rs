//! Reduced-scale CIFAR-10 comparison: the 6-conv CNN trained under P and
//! PR across several seeds with shared hyperparameters. Reports the mean
//! final accuracy per mode and, per layer, the mean over seeds of the
//! final-epoch min |sin| angle statistic.

use std::path::Path;
use std::thread;

use anyhow::{Context, Result};
use prgrad_core::ProductMode;

use crate::config::{DatasetCfg, TrainConfig};
use crate::datasets::load_dataset;
use crate::emit::atomic_write;
use crate::runner::{train_with_data, RunOutput};

pub struct CifarSummary {
    /// (mode, seed, final test accuracy) per run.
    pub per_run: Vec<(ProductMode, u64, f64)>,
    pub mean_acc_p: f64,
    pub mean_acc_pr: f64,
    /// (layer, mean final-epoch min|sin| under P, same under PR).
    pub layer_rows: Vec<(String, f64, f64)>,
    /// Layers where the PR mean min|sin| is at least the P mean.
    pub layers_pr_ge_p: usize,
}

/// PRGRAD_THREADS caps run-level parallelism; defaults to the machine's
/// available parallelism.
pub fn thread_cap() -> usize {
    std::env::var("PRGRAD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_config(dataset: &DatasetCfg, out_root: &Path, mode: ProductMode, seed: u64, epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::default_for("cnn-small", "cifar10");
    cfg.dataset = dataset.clone();
    cfg.mode = String::from(mode.as_str());
    cfg.epochs = epochs;
    cfg.seed = seed;
    cfg.augment = true;
    cfg.optimizer.weight_decay = 5e-4;
    cfg.out_dir = out_root.join(format!("{}-seed{}", mode.as_str().to_lowercase(), seed));
    cfg
}

/// Trains P and PR for `seeds` seeds each, at most `thread_cap()` runs at a
/// time. The dataset is loaded once and shared read-only across runs.
pub fn cifar_small(
    data_dir: &Path,
    out_root: &Path,
    seeds: u64,
    epochs: usize,
) -> Result<CifarSummary> {
    let dataset = DatasetCfg {
        name: String::from("cifar10"),
        data_dir: Some(data_dir.to_path_buf()),
        subset: None,
        blobs: None,
    };
    let data = load_dataset(&dataset, 0)?;

    let jobs: Vec<(ProductMode, u64)> = [ProductMode::P, ProductMode::PR]
        .iter()
        .flat_map(|&m| (0..seeds).map(move |s| (m, s)))
        .collect();

    let mut results: Vec<(ProductMode, u64, RunOutput)> = Vec::new();
    for wave in jobs.chunks(thread_cap()) {
        let wave_results: Vec<Result<(ProductMode, u64, RunOutput)>> = thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|&(mode, seed)| {
                    let cfg = run_config(&dataset, out_root, mode, seed, epochs);
                    let data = &data;
                    scope.spawn(move || {
                        println!("== mode {} seed {} ==", mode.as_str(), seed);
                        let out = train_with_data(&cfg, data)?;
                        Ok((mode, seed, out))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training thread panicked"))
                .collect()
        });
        for r in wave_results {
            results.push(r.context("cifar-small run failed")?);
        }
    }

    let summary = summarize(&results, epochs);

    let mut runs_csv = String::from("mode,seed,final_test_acc\n");
    for (mode, seed, acc) in &summary.per_run {
        runs_csv.push_str(&format!("{},{},{:.6}\n", mode.as_str(), seed, acc));
    }
    atomic_write(&out_root.join("runs.csv"), runs_csv.as_bytes())?;

    let mut angle_csv = String::from("layer,min_abs_sin_p,min_abs_sin_pr,pr_ge_p\n");
    for (layer, p, pr) in &summary.layer_rows {
        angle_csv.push_str(&format!("{},{:.6},{:.6},{}\n", layer, p, pr, pr >= p));
    }
    atomic_write(&out_root.join("angle_comparison.csv"), angle_csv.as_bytes())?;

    println!("\nmode  mean final test accuracy over {seeds} seeds");
    println!("P     {:.4}", summary.mean_acc_p);
    println!("PR    {:.4}", summary.mean_acc_pr);
    println!(
        "final-epoch min|sin| under PR >= P in {}/{} layers",
        summary.layers_pr_ge_p,
        summary.layer_rows.len()
    );
    Ok(summary)
}

fn summarize(results: &[(ProductMode, u64, RunOutput)], final_epoch: usize) -> CifarSummary {
    let per_run: Vec<(ProductMode, u64, f64)> = results
        .iter()
        .map(|(m, s, out)| (*m, *s, out.final_test_acc))
        .collect();
    let mean = |mode: ProductMode| {
        let accs: Vec<f64> = per_run
            .iter()
            .filter(|(m, _, _)| *m == mode)
            .map(|(_, _, a)| *a)
            .collect();
        accs.iter().sum::<f64>() / accs.len().max(1) as f64
    };

    // Mean over seeds of the final-epoch min|sin|, per (mode, layer),
    // keeping the layer order of the first run.
    let mut layers: Vec<String> = Vec::new();
    for (_, _, out) in results {
        for (epoch, e) in &out.angles {
            if *epoch == final_epoch && !layers.contains(&e.layer) {
                layers.push(e.layer.clone());
            }
        }
    }
    let mean_min_sin = |mode: ProductMode, layer: &str| {
        let vals: Vec<f64> = results
            .iter()
            .filter(|(m, _, _)| *m == mode)
            .flat_map(|(_, _, out)| {
                out.angles
                    .iter()
                    .filter(|(ep, e)| *ep == final_epoch && e.layer == layer)
                    .map(|(_, e)| e.min_abs_sin)
            })
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    };
    let layer_rows: Vec<(String, f64, f64)> = layers
        .iter()
        .map(|l| (l.clone(), mean_min_sin(ProductMode::P, l), mean_min_sin(ProductMode::PR, l)))
        .collect();
    let layers_pr_ge_p = layer_rows.iter().filter(|(_, p, pr)| pr >= p).count();
    let mean_acc_p = mean(ProductMode::P);
    let mean_acc_pr = mean(ProductMode::PR);

    CifarSummary {
        per_run,
        mean_acc_p,
        mean_acc_pr,
        layer_rows,
        layers_pr_ge_p,
    }
}
