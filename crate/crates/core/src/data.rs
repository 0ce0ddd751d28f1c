//! Dataset containers, bit-exact format parsers, the pad-crop-flip
//! augmentation, seeded batching, and synthetic blobs for fast tests.
//!
//! Parsers return raw bytes or [0,1] floats; normalization beyond that
//! (for example CIFAR channel standardization) is applied by the caller so
//! the decode stage stays byte-reversible.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// In-memory dataset: N images of identical shape plus integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub num_classes: usize,
    /// Shape of one image, e.g. [3, 32, 32] or [784].
    pub image_shape: Vec<usize>,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: String,
        num_classes: usize,
        image_shape: Vec<usize>,
        images: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per_image: usize = image_shape.iter().product();
        if per_image == 0 {
            return Err(Error::invalid("dataset image shape must be non-empty"));
        }
        if images.len() != per_image * labels.len() {
            return Err(Error::invalid(format!(
                "dataset holds {} floats but {} labels x {} floats per image",
                images.len(),
                labels.len(),
                per_image
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            name,
            num_classes,
            image_shape,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_numel(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let k = self.image_numel();
        &self.images[i * k..(i + 1) * k]
    }

    /// Keeps the first n examples; used for reduced-scale runs.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            name: self.name.clone(),
            num_classes: self.num_classes,
            image_shape: self.image_shape.clone(),
            images: self.images[..n * self.image_numel()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

/// Parsed IDX payload: big-endian dims and the raw unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxData {
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

/// IDX format: two zero bytes, a type code (only 0x08 = unsigned byte is
/// supported), a rank byte, `rank` big-endian u32 dims, then the payload.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    if bytes.len() < 4 {
        return Err(Error::invalid("idx: stream shorter than the 4-byte magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::invalid(format!(
            "idx: bad magic prefix {:02x} {:02x}",
            bytes[0], bytes[1]
        )));
    }
    if bytes[2] != 0x08 {
        return Err(Error::invalid(format!(
            "idx: unsupported type code 0x{:02x} (only 0x08 unsigned byte)",
            bytes[2]
        )));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::invalid("idx: truncated dimension table"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let o = 4 + 4 * i;
        let d = u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
        dims.push(d as usize);
    }
    let expected: usize = dims.iter().product();
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(Error::invalid(format!(
            "idx: expected {expected} payload bytes, got {actual}"
        )));
    }
    Ok(IdxData {
        dims,
        bytes: bytes[header..].to_vec(),
    })
}

/// Pixel bytes to [0,1] floats.
pub fn idx_scaled_f32(idx: &IdxData) -> Vec<f32> {
    idx.bytes.iter().map(|&b| b as f32 / 255.0).collect()
}

/// Rank-1 IDX payload as labels.
pub fn idx_labels(idx: &IdxData) -> Result<Vec<usize>> {
    if idx.dims.len() != 1 {
        return Err(Error::invalid(format!(
            "idx: labels must be rank 1, got rank {}",
            idx.dims.len()
        )));
    }
    Ok(idx.bytes.iter().map(|&b| b as usize).collect())
}

pub const CIFAR_RECORD: usize = 3073;

/// CIFAR-10 binary shard: records of 1 label byte + 3072 pixel bytes laid
/// out as R plane, G plane, B plane, each row-major 32x32. Pixels scale to
/// [0,1]; image shape is [3, 32, 32].
pub fn parse_cifar10_bin(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::invalid(format!(
            "cifar10: length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let rec = &bytes[r * CIFAR_RECORD..(r + 1) * CIFAR_RECORD];
        if rec[0] >= 10 {
            return Err(Error::invalid(format!(
                "cifar10: record {r} has label {} >= 10",
                rec[0]
            )));
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(
        String::from("cifar10"),
        10,
        vec![3, 32, 32],
        images,
        labels,
    )
}

/// Inverse of `parse_cifar10_bin`, for the byte-for-byte round-trip check.
pub fn encode_cifar10_bin(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.image_shape != [3, 32, 32] {
        return Err(Error::invalid("cifar10 encode expects [3, 32, 32] images"));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        for &v in ds.image(i) {
            out.push(libm::roundf(v * 255.0) as u8);
        }
    }
    Ok(out)
}

/// Deterministic core of the augmentation: zero-pad each spatial border by
/// `pad`, crop a (h, w) window at offset (oy, ox) of the padded image, then
/// optionally flip horizontally. Offset (pad, pad) without flip is the
/// identity.
#[allow(clippy::too_many_arguments)]
pub fn apply_pad_crop_flip(
    image: &[f32],
    c: usize,
    h: usize,
    w: usize,
    pad: usize,
    oy: usize,
    ox: usize,
    flip: bool,
) -> Vec<f32> {
    debug_assert_eq!(image.len(), c * h * w);
    debug_assert!(oy <= 2 * pad && ox <= 2 * pad);
    let mut out = vec![0.0f32; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            // Source row in the original image for padded row (oy + y).
            let sy = (oy + y) as isize - pad as isize;
            if sy < 0 || sy as usize >= h {
                continue;
            }
            for x in 0..w {
                let dst_x = if flip { w - 1 - x } else { x };
                let sx = (ox + x) as isize - pad as isize;
                if sx < 0 || sx as usize >= w {
                    continue;
                }
                out[(ci * h + y) * w + dst_x] = image[(ci * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Standard CIFAR augmentation: pad 4, random 32x32 crop, then
/// horizontal flip with probability one half. Draw order is fixed
/// (oy, ox, flip) so seeded runs reproduce exactly.
pub fn augment_pad_crop_flip(
    image: &[f32],
    c: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<f32>> {
    if image.len() != c * 32 * 32 {
        return Err(Error::invalid(format!(
            "augmentation expects {c}x32x32 images, got {} values",
            image.len()
        )));
    }
    let oy = rng.random_range(0..=8usize);
    let ox = rng.random_range(0..=8usize);
    let flip = rng.random_bool(0.5);
    Ok(apply_pad_crop_flip(image, c, 32, 32, 4, oy, ox, flip))
}

/// Seeded epoch iterator yielding (images, labels) with the last partial
/// batch kept. Each epoch gets its own seed so shuffles differ.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl<'a> Iterator for Batches<'a> {
    type Item = (Vec<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let k = self.ds.image_numel();
        let mut x = Vec::with_capacity((end - self.cursor) * k);
        let mut y = Vec::with_capacity(end - self.cursor);
        for &i in &self.order[self.cursor..end] {
            x.extend_from_slice(self.ds.image(i));
            y.push(self.ds.labels[i]);
        }
        self.cursor = end;
        Some((x, y))
    }
}

pub fn make_batches(
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<Batches<'_>> {
    if ds.is_empty() {
        return Err(Error::invalid("cannot batch an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let order = if shuffle {
        let mut r = rng::seeded_stream(seed, rng::STREAM_DATA);
        rng::shuffled_indices(&mut r, ds.len())
    } else {
        (0..ds.len()).collect()
    };
    Ok(Batches {
        ds,
        order,
        batch_size,
        cursor: 0,
    })
}

/// Gaussian blobs at random unit-sphere centers scaled by `sep`, unit
/// variance, class-major order. Fast stand-in for image datasets in tests.
pub fn synthetic_blobs(
    seed: u64,
    n_per_class: usize,
    classes: usize,
    dim: usize,
    sep: f32,
) -> Result<Dataset> {
    if sep <= 0.0 {
        return Err(Error::invalid("blob separation must be positive"));
    }
    if n_per_class == 0 || classes == 0 || dim == 0 {
        return Err(Error::invalid("blob dataset dimensions must be positive"));
    }
    let mut r = rng::seeded_stream(seed, rng::STREAM_SYNTH);
    let mut images = Vec::with_capacity(n_per_class * classes * dim);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for class in 0..classes {
        let mut center = vec![0.0f32; dim];
        rng::fill_standard_normal(&mut r, &mut center);
        let norm = crate::math::norm64(&center).max(crate::math::EPS_NORM) as f32;
        center.iter_mut().for_each(|v| *v = *v / norm * sep);
        for _ in 0..n_per_class {
            let mut point = vec![0.0f32; dim];
            rng::fill_standard_normal(&mut r, &mut point);
            for (p, c) in point.iter_mut().zip(&center) {
                *p += c;
            }
            images.extend_from_slice(&point);
            labels.push(class);
        }
    }
    Dataset::new(String::from("blobs"), classes, vec![dim], images, labels)
}

/// Deterministic tail split: the first (1 - frac) of each dataset stays
/// train, the rest becomes test. Blobs are class-major, so splitting per
/// class keeps both sides balanced.
pub fn split_per_class(ds: &Dataset, per_class_test: usize) -> Result<(Dataset, Dataset)> {
    let mut train_imgs = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_imgs = Vec::new();
    let mut test_labels = Vec::new();
    let k = ds.image_numel();
    let mut seen = vec![0usize; ds.num_classes];
    let per_class_total = ds.len() / ds.num_classes;
    if per_class_test >= per_class_total {
        return Err(Error::invalid("test split would consume every example"));
    }
    for i in 0..ds.len() {
        let label = ds.labels[i];
        let into_test = seen[label] >= per_class_total - per_class_test;
        seen[label] += 1;
        if into_test {
            test_imgs.extend_from_slice(ds.image(i));
            test_labels.push(label);
        } else {
            train_imgs.extend_from_slice(&ds.images[i * k..(i + 1) * k]);
            train_labels.push(label);
        }
    }
    Ok((
        Dataset::new(
            ds.name.clone(),
            ds.num_classes,
            ds.image_shape.clone(),
            train_imgs,
            train_labels,
        )?,
        Dataset::new(
            ds.name.clone(),
            ds.num_classes,
            ds.image_shape.clone(),
            test_imgs,
            test_labels,
        )?,
    ))
}
