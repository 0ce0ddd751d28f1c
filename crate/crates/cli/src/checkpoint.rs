//! Checkpoint file format: magic "PRNET001", little-endian u32 tensor
//! count, then per tensor a u32 name length, the UTF-8 name, u32 rank,
//! u32 dims, and the row-major f32 payload (all little-endian). Paired
//! with a model.json sidecar describing how to rebuild the graph.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use prgrad_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::emit::atomic_write;

pub const MAGIC: &[u8; 8] = b"PRNET001";

/// Sidecar written next to the checkpoint so a later process can rebuild
/// the model and its input pipeline exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub model: String,
    pub mode: String,
    pub dataset: String,
    /// Seed the run used; synthetic datasets need it to regenerate the
    /// same examples.
    pub seed: u64,
    /// Per-channel (mean, std) applied after [0,1] scaling; empty when the
    /// dataset is used unstandardized.
    pub channel_stats: Vec<(f32, f32)>,
}

pub fn encode(names: &[String], tensors: &[Tensor]) -> Result<Vec<u8>> {
    if names.len() != tensors.len() {
        bail!("checkpoint encode: {} names for {} tensors", names.len(), tensors.len());
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(names.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            bail!("checkpoint truncated at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        bail!("not a PRNET001 checkpoint (bad magic)");
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .context("checkpoint tensor name is not UTF-8")?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4)?;
        let mut data = Vec::with_capacity(numel);
        for chunk in payload.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        bail!("{} trailing bytes after the tensor table", bytes.len() - r.pos);
    }
    Ok(out)
}

pub fn save(path: &Path, names: &[String], tensors: &[Tensor]) -> Result<()> {
    atomic_write(path, &encode(names, tensors)?)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    decode(&bytes)
}

pub fn save_sidecar(path: &Path, sidecar: &ModelSidecar) -> Result<()> {
    let json = serde_json::to_string_pretty(sidecar)?;
    atomic_write(path, json.as_bytes())
}

pub fn load_sidecar(path: &Path) -> Result<ModelSidecar> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_tensors() {
        let names = vec![String::from("fc1.w"), String::from("fc1.b")];
        let tensors = vec![
            Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 5.5, -6.0]).unwrap(),
            Tensor::new(vec![2], vec![0.25, -0.75]).unwrap(),
        ];
        let bytes = encode(&names, &tensors).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "fc1.w");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        assert_eq!(back[0].1.data(), tensors[0].data());
        assert_eq!(back[1].1.data(), tensors[1].data());
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(decode(b"NOTMAGIC").is_err());
        let names = vec![String::from("t")];
        let tensors = vec![Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()];
        let mut bytes = encode(&names, &tensors).unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(decode(&bytes).is_err());
        let mut extra = encode(&names, &tensors).unwrap();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn save_and_load_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.prnet");
        let names = vec![String::from("w")];
        let tensors = vec![Tensor::new(vec![1, 2], vec![7.0, 8.0]).unwrap()];
        save(&path, &names, &tensors).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back[0].1.data(), &[7.0, 8.0]);

        let sidecar = ModelSidecar {
            model: String::from("mlp"),
            mode: String::from("PR"),
            dataset: String::from("blobs"),
            seed: 7,
            channel_stats: vec![(0.5, 0.25)],
        };
        let spath = dir.path().join("model.json");
        save_sidecar(&spath, &sidecar).unwrap();
        let back = load_sidecar(&spath).unwrap();
        assert_eq!(back.mode, "PR");
        assert_eq!(back.channel_stats, vec![(0.5, 0.25)]);
    }
}
