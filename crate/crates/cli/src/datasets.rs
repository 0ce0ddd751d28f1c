//! Dataset loading for the CLI: Fashion-MNIST IDX files (optionally
//! gzipped), CIFAR-10 binary shards, and the synthetic blobs used by fast
//! tests. Image normalization statistics are computed from the training
//! split only and echoed into the run's model.json sidecar.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flate2::read::GzDecoder;
use prgrad_core::data::{
    idx_labels, idx_scaled_f32, parse_cifar10_bin, parse_idx, split_per_class, synthetic_blobs,
    Dataset,
};

use crate::config::{BlobsCfg, DatasetCfg};

/// Train/test pair plus the normalization applied to both, recorded so a
/// later `angle-stats` invocation can reproduce the exact inputs.
#[derive(Debug)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    /// Per-channel (mean, std) subtracted/divided after the [0,1] scaling;
    /// empty when no standardization was applied.
    pub channel_stats: Vec<(f32, f32)>,
}

/// Reads a file that may be gzip-compressed (by extension or by the
/// magic bytes 0x1f 0x8b).
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let gz = raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b;
    if gz {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .with_context(|| format!("decompressing {}", path.display()))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Finds `base` or `base.gz` under `dir`.
fn find_idx_file(dir: &Path, base: &str) -> Result<PathBuf> {
    let plain = dir.join(base);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{base}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    bail!(
        "missing {base}[.gz] in {} (expected the standard Fashion-MNIST files)",
        dir.display()
    )
}

fn load_idx_split(dir: &Path, images: &str, labels: &str) -> Result<Dataset> {
    let img_idx = parse_idx(&read_maybe_gz(&find_idx_file(dir, images)?)?)?;
    let lbl_idx = parse_idx(&read_maybe_gz(&find_idx_file(dir, labels)?)?)?;
    if img_idx.dims.len() != 3 || img_idx.dims[1] != 28 || img_idx.dims[2] != 28 {
        bail!("{images}: expected Nx28x28 images, got dims {:?}", img_idx.dims);
    }
    let data = idx_scaled_f32(&img_idx);
    let labels = idx_labels(&lbl_idx)?;
    Ok(Dataset::new(
        String::from("fashion-mnist"),
        10,
        vec![784],
        data,
        labels,
    )?)
}

pub fn load_fashion_mnist(dir: &Path) -> Result<LoadedData> {
    let train = load_idx_split(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = load_idx_split(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    Ok(LoadedData {
        train,
        test,
        channel_stats: Vec::new(),
    })
}

/// Accepts either the directory containing the `.bin` shards or its parent
/// holding the standard `cifar-10-batches-bin` subdirectory.
fn cifar_shard_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

fn concat_datasets(parts: Vec<Dataset>) -> Result<Dataset> {
    let first = parts.first().context("no CIFAR shards loaded")?;
    let (name, classes, shape) = (
        first.name.clone(),
        first.num_classes,
        first.image_shape.clone(),
    );
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        images.extend_from_slice(&p.images);
        labels.extend_from_slice(&p.labels);
    }
    Ok(Dataset::new(name, classes, shape, images, labels)?)
}

pub fn load_cifar10(dir: &Path) -> Result<LoadedData> {
    let shards = cifar_shard_dir(dir);
    let mut parts = Vec::new();
    for i in 1..=5 {
        let path = shards.join(format!("data_batch_{i}.bin"));
        let bytes =
            fs::read(&path).with_context(|| format!("reading CIFAR shard {}", path.display()))?;
        parts.push(parse_cifar10_bin(&bytes)?);
    }
    let mut train = concat_datasets(parts)?;
    let test_path = shards.join("test_batch.bin");
    let bytes = fs::read(&test_path)
        .with_context(|| format!("reading CIFAR shard {}", test_path.display()))?;
    let mut test = parse_cifar10_bin(&bytes)?;

    let stats = standardize_per_channel(&mut train, &mut test);
    Ok(LoadedData {
        train,
        test,
        channel_stats: stats,
    })
}

/// Per-channel standardization: mean/std are estimated on the training
/// images and applied to both splits. Returns the (mean, std) pairs.
pub fn standardize_per_channel(train: &mut Dataset, test: &mut Dataset) -> Vec<(f32, f32)> {
    let [c, h, w] = train.image_shape[..] else {
        return Vec::new();
    };
    let plane = h * w;
    let per_image = c * plane;
    let n = train.len();
    let mut stats = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for i in 0..n {
            let base = i * per_image + ch * plane;
            for &v in &train.images[base..base + plane] {
                sum += v as f64;
                sumsq += v as f64 * v as f64;
            }
        }
        let count = (n * plane) as f64;
        let mean = sum / count;
        let var = (sumsq / count - mean * mean).max(1e-12);
        stats.push((mean as f32, var.sqrt() as f32));
    }
    for ds in [train, test] {
        let n = ds.len();
        for i in 0..n {
            for (ch, &(mean, std)) in stats.iter().enumerate() {
                let base = i * per_image + ch * plane;
                for v in &mut ds.images[base..base + plane] {
                    *v = (*v - mean) / std;
                }
            }
        }
    }
    stats
}

pub fn load_blobs(seed: u64, cfg: &BlobsCfg) -> Result<LoadedData> {
    let all = synthetic_blobs(seed, cfg.per_class, cfg.classes, cfg.dim, cfg.separation)?;
    let (train, test) = split_per_class(&all, cfg.test_per_class)?;
    Ok(LoadedData {
        train,
        test,
        channel_stats: Vec::new(),
    })
}

/// Loads whatever the config names, applying the optional training-subset
/// cap afterwards so normalization still sees the full train split.
pub fn load_dataset(cfg: &DatasetCfg, seed: u64) -> Result<LoadedData> {
    let mut loaded = match cfg.name.as_str() {
        "fashion-mnist" => {
            let dir = cfg
                .data_dir
                .as_ref()
                .context("fashion-mnist needs data_dir")?;
            load_fashion_mnist(dir)?
        }
        "cifar10" => {
            let dir = cfg.data_dir.as_ref().context("cifar10 needs data_dir")?;
            load_cifar10(dir)?
        }
        "blobs" => load_blobs(seed, &cfg.blobs.clone().unwrap_or_default())?,
        other => bail!("unknown dataset {other:?}"),
    };
    if let Some(cap) = cfg.subset {
        if cap == 0 {
            bail!("dataset subset must be at least 1");
        }
        loaded.train = loaded.train.truncated(cap.min(loaded.train.len()));
    }
    Ok(loaded)
}

/// True when the files criterion-level experiments need are present; used
/// by tests to skip honestly instead of failing in data-less environments.
pub fn fashion_mnist_available(dir: &Path) -> bool {
    find_idx_file(dir, "train-images-idx3-ubyte").is_ok()
        && find_idx_file(dir, "train-labels-idx1-ubyte").is_ok()
        && find_idx_file(dir, "t10k-images-idx3-ubyte").is_ok()
        && find_idx_file(dir, "t10k-labels-idx1-ubyte").is_ok()
}

pub fn cifar10_available(dir: &Path) -> bool {
    let shards = cifar_shard_dir(dir);
    (1..=5).all(|i| shards.join(format!("data_batch_{i}.bin")).is_file())
        && shards.join("test_batch.bin").is_file()
}

/// Default data root: $PRGRAD_DATA_DIR, else ./data.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os("PRGRAD_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn tiny_idx_images(n: usize) -> Vec<u8> {
        let mut bytes = vec![0, 0, 0x08, 3];
        for dim in [n as u32, 28, 28] {
            bytes.extend_from_slice(&dim.to_be_bytes());
        }
        bytes.extend(std::iter::repeat_n(0u8, n * 784).enumerate().map(|(i, _)| (i % 251) as u8));
        bytes
    }

    fn tiny_idx_labels(n: usize) -> Vec<u8> {
        let mut bytes = vec![0, 0, 0x08, 1];
        bytes.extend_from_slice(&(n as u32).to_be_bytes());
        bytes.extend((0..n).map(|i| (i % 10) as u8));
        bytes
    }

    #[test]
    fn loads_plain_and_gzipped_idx() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        fs::write(p.join("train-images-idx3-ubyte"), tiny_idx_images(6)).unwrap();
        fs::write(p.join("train-labels-idx1-ubyte"), tiny_idx_labels(6)).unwrap();
        // Test split gzipped to cover both paths.
        for (name, bytes) in [
            ("t10k-images-idx3-ubyte.gz", tiny_idx_images(4)),
            ("t10k-labels-idx1-ubyte.gz", tiny_idx_labels(4)),
        ] {
            let f = fs::File::create(p.join(name)).unwrap();
            let mut enc = GzEncoder::new(f, Compression::default());
            enc.write_all(&bytes).unwrap();
            enc.finish().unwrap();
        }
        assert!(fashion_mnist_available(p));
        let loaded = load_fashion_mnist(p).unwrap();
        assert_eq!(loaded.train.len(), 6);
        assert_eq!(loaded.test.len(), 4);
        assert_eq!(loaded.train.image_shape, vec![784]);
        // Pixel scaling to [0,1].
        assert!(loaded
            .train
            .images
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn missing_files_name_the_expectation() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_fashion_mnist(dir.path()).unwrap_err();
        assert!(err.to_string().contains("train-images-idx3-ubyte"));
        assert!(!fashion_mnist_available(dir.path()));
    }

    #[test]
    fn cifar_round_trip_with_standardization() {
        use prgrad_core::data::encode_cifar10_bin;
        let dir = tempfile::tempdir().unwrap();
        let shards = dir.path().join("cifar-10-batches-bin");
        fs::create_dir(&shards).unwrap();
        // Five tiny train shards plus a test shard, all synthesized.
        let mut label = 0usize;
        for i in 1..=5 {
            let ds = fake_cifar(8, &mut label);
            fs::write(
                shards.join(format!("data_batch_{i}.bin")),
                encode_cifar10_bin(&ds).unwrap(),
            )
            .unwrap();
        }
        let test = fake_cifar(8, &mut label);
        fs::write(shards.join("test_batch.bin"), encode_cifar10_bin(&test).unwrap()).unwrap();

        assert!(cifar10_available(dir.path()));
        let loaded = load_cifar10(dir.path()).unwrap();
        assert_eq!(loaded.train.len(), 40);
        assert_eq!(loaded.test.len(), 8);
        assert_eq!(loaded.channel_stats.len(), 3);
        // Standardized training channels have near-zero mean.
        let plane = 32 * 32;
        for ch in 0..3 {
            let mut sum = 0.0f64;
            for i in 0..loaded.train.len() {
                let base = i * 3 * plane + ch * plane;
                sum += loaded.train.images[base..base + plane]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            let mean = sum / (loaded.train.len() * plane) as f64;
            assert!(mean.abs() < 1e-4, "channel {ch} mean {mean}");
        }
    }

    fn fake_cifar(n: usize, label: &mut usize) -> Dataset {
        let mut images = Vec::with_capacity(n * 3 * 32 * 32);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            labels.push(*label % 10);
            *label += 1;
            for j in 0..3 * 32 * 32 {
                images.push(((i * 7 + j * 13) % 256) as f32 / 255.0);
            }
        }
        Dataset::new(String::from("cifar10"), 10, vec![3, 32, 32], images, labels).unwrap()
    }

    #[test]
    fn blobs_split_sizes() {
        let cfg = BlobsCfg::default();
        let loaded = load_blobs(5, &cfg).unwrap();
        assert_eq!(loaded.train.len(), cfg.classes * (cfg.per_class - cfg.test_per_class));
        assert_eq!(loaded.test.len(), cfg.classes * cfg.test_per_class);
    }
}
