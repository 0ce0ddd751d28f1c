//! End-to-end smoke runs of the ablation and CIFAR drivers against tiny
//! synthetic datasets written in the real on-disk formats (IDX, CIFAR
//! binary shards). These exercise the exact code paths the dataset-scale
//! experiments use: format parsing, three-mode training, per-seed runs,
//! and summary emission. Accuracy claims stay with the acceptance suite.

use std::path::Path;

use prgrad_cli::{ablation, cifar, datasets};
use prgrad_core::data::{encode_cifar10_bin, Dataset};
use prgrad_core::ProductMode;

fn write_idx_images(path: &Path, n: usize, pixel_for: impl Fn(usize, usize) -> u8) {
    let mut bytes = vec![0u8, 0, 0x08, 3];
    for dim in [n as u32, 28, 28] {
        bytes.extend_from_slice(&dim.to_be_bytes());
    }
    for i in 0..n {
        for p in 0..28 * 28 {
            bytes.push(pixel_for(i, p));
        }
    }
    std::fs::write(path, bytes).unwrap();
}

fn write_idx_labels(path: &Path, labels: &[u8]) {
    let mut bytes = vec![0u8, 0, 0x08, 1];
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    std::fs::write(path, bytes).unwrap();
}

/// Class-dependent blocky images: class k lights up pixel block k.
fn fake_fashion_mnist(dir: &Path, train_n: usize, test_n: usize) {
    let label = |i: usize| (i % 10) as u8;
    let pixel = |i: usize, p: usize| {
        let class = i % 10;
        if p / 78 == class {
            200
        } else {
            10
        }
    };
    write_idx_images(&dir.join("train-images-idx3-ubyte"), train_n, pixel);
    write_idx_labels(
        &dir.join("train-labels-idx1-ubyte"),
        &(0..train_n).map(label).collect::<Vec<_>>(),
    );
    write_idx_images(&dir.join("t10k-images-idx3-ubyte"), test_n, pixel);
    write_idx_labels(
        &dir.join("t10k-labels-idx1-ubyte"),
        &(0..test_n).map(label).collect::<Vec<_>>(),
    );
}

fn fake_cifar10(dir: &Path, per_shard: usize, test_n: usize) {
    let make = |n: usize, offset: usize| {
        let labels: Vec<usize> = (0..n).map(|i| (i + offset) % 10).collect();
        let images: Vec<f32> = (0..n)
            .flat_map(|i| {
                let class = (i + offset) % 10;
                (0..3 * 32 * 32).map(move |p| {
                    if p / 308 == class {
                        0.8
                    } else {
                        0.05
                    }
                })
            })
            .collect();
        Dataset::new(String::from("cifar10"), 10, vec![3, 32, 32], images, labels).unwrap()
    };
    for shard in 1..=5 {
        let ds = make(per_shard, shard);
        std::fs::write(
            dir.join(format!("data_batch_{shard}.bin")),
            encode_cifar10_bin(&ds).unwrap(),
        )
        .unwrap();
    }
    std::fs::write(
        dir.join("test_batch.bin"),
        encode_cifar10_bin(&make(test_n, 0)).unwrap(),
    )
    .unwrap();
}

#[test]
fn ablation_driver_runs_all_three_modes() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    fake_fashion_mnist(data.path(), 96, 32);
    assert!(datasets::fashion_mnist_available(data.path()));

    let result = ablation::ablation_fmnist(data.path(), out.path(), 1, Some(64), 5).unwrap();
    assert_eq!(result.results.len(), 3);
    for mode in ablation::ABLATION_MODES {
        assert!(result.final_acc(mode).is_some(), "missing {}", mode.as_str());
    }

    let csv = std::fs::read_to_string(out.path().join("ablation.csv")).unwrap();
    assert!(csv.starts_with("mode,final_test_acc\n"));
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.contains("P_LENGTH_ONLY,"));
    // Each mode's run directory carries the full artifact set.
    for sub in ["p", "p_direction_only", "p_length_only"] {
        assert!(out.path().join(sub).join("metrics.csv").is_file(), "{sub}");
        assert!(out.path().join(sub).join("checkpoint.prnet").is_file(), "{sub}");
    }
}

#[test]
fn cifar_driver_runs_seeds_and_summarizes() {
    let data = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    fake_cifar10(data.path(), 16, 16);
    assert!(datasets::cifar10_available(data.path()));

    let summary = cifar::cifar_small(data.path(), out.path(), 1, 1).unwrap();
    assert_eq!(summary.per_run.len(), 2, "P and PR, one seed each");
    assert!(summary.per_run.iter().any(|(m, _, _)| *m == ProductMode::P));
    assert!(summary.per_run.iter().any(|(m, _, _)| *m == ProductMode::PR));
    // 6 convolutions plus the classifier head get angle rows.
    assert_eq!(summary.layer_rows.len(), 7);
    assert!(summary.layers_pr_ge_p <= summary.layer_rows.len());

    let runs = std::fs::read_to_string(out.path().join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 3);
    let cmp = std::fs::read_to_string(out.path().join("angle_comparison.csv")).unwrap();
    assert!(cmp.starts_with("layer,min_abs_sin_p,min_abs_sin_pr,pr_ge_p\n"));
    assert!(cmp.contains("conv1,"));
    assert!(cmp.contains("fc,"));
}
