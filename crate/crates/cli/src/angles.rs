//! Standalone angle statistics: rebuild a model from a checkpoint and its
//! model.json sidecar, run one evaluation batch, and report min |sin| and
//! mean |cos| per layer.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use prgrad_core::angle::AngleEntry;

use crate::checkpoint;
use crate::config::DatasetCfg;
use crate::datasets::{default_data_dir, load_dataset};
use crate::emit;
use crate::runner::{epoch_angle_stats, model_from_checkpoint};

const EVAL_BATCH: usize = 128;

/// Computes the statistics and, when `out` is given, writes them as an
/// angles.csv with epoch column 0 (meaning "as loaded").
pub fn angle_stats_for_checkpoint(
    ckpt: &Path,
    data_dir: Option<&Path>,
    out: Option<&Path>,
) -> Result<Vec<AngleEntry>> {
    let sidecar_path = ckpt
        .parent()
        .map(|d| d.join("model.json"))
        .ok_or_else(|| anyhow!("checkpoint path has no parent directory"))?;
    let sidecar = checkpoint::load_sidecar(&sidecar_path)
        .with_context(|| format!("loading sidecar {}", sidecar_path.display()))?;

    let needs_dir = sidecar.dataset != "blobs";
    let dataset = DatasetCfg {
        name: sidecar.dataset.clone(),
        data_dir: if needs_dir {
            Some(data_dir.map_or_else(default_data_dir, PathBuf::from))
        } else {
            None
        },
        subset: None,
        blobs: None,
    };
    let data = load_dataset(&dataset, sidecar.seed)?;
    let mut model = model_from_checkpoint(
        ckpt,
        &sidecar,
        &data.test.image_shape,
        data.test.num_classes,
    )?;
    let entries = epoch_angle_stats(&mut model, &data.test, EVAL_BATCH)?;

    println!("layer    min|sin|  mean|cos|");
    for e in &entries {
        println!("{:<8} {:.6}  {:.6}", e.layer, e.min_abs_sin, e.mean_abs_cos);
    }
    if let Some(path) = out {
        let rows: Vec<(usize, AngleEntry)> = entries.iter().map(|e| (0, e.clone())).collect();
        emit::write_angles(path, &rows)?;
    }
    Ok(entries)
}
