//! Experiment configuration: JSON schema, defaults, validation, and the
//! CLI flag overrides. One config captures everything a run needs so two
//! runs differing only in `mode` share every other hyperparameter.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use prgrad_core::model::ModelCfg;
use prgrad_core::ProductMode;
use serde::{Deserialize, Serialize};

/// Everything one training run needs. Serialized as JSON; unknown fields
/// are rejected so typos fail loudly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// "mlp" (784-256-256-256-256-10, ReLU) or "cnn-small" (six 3x3 convs,
    /// global average pool, linear head).
    #[serde(default = "default_model")]
    pub model: String,
    /// Product mode: P, R, PR, P_LENGTH_ONLY, or P_DIRECTION_ONLY.
    #[serde(default = "default_mode")]
    pub mode: String,
    pub dataset: DatasetCfg,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimCfg,
    /// "cosine" (annealed to zero over all steps) or "constant".
    #[serde(default = "default_schedule")]
    pub schedule: String,
    #[serde(default)]
    pub seed: u64,
    /// Pad-4 random crop plus horizontal flip on training images
    /// (32x32 inputs only).
    #[serde(default)]
    pub augment: bool,
    /// Directory receiving metrics.csv, angles.csv, checkpoint, model.json.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// When true, the run first replays the pair and layer gradient checks
    /// for its mode (64-bit shadow oracles) and refuses to train on failure.
    #[serde(default)]
    pub shadow_precision: bool,
}

fn default_model() -> String {
    String::from("mlp")
}

fn default_mode() -> String {
    String::from("P")
}

fn default_epochs() -> usize {
    30
}

fn default_batch() -> usize {
    128
}

fn default_schedule() -> String {
    String::from("cosine")
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Which data feeds the run. `name` selects the loader; image datasets
/// read from `data_dir`, synthetic blobs are generated from `blobs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetCfg {
    /// "fashion-mnist", "cifar10", or "blobs".
    pub name: String,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Optional cap on the number of training examples (CI-scale runs).
    #[serde(default)]
    pub subset: Option<usize>,
    #[serde(default)]
    pub blobs: Option<BlobsCfg>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsCfg {
    #[serde(default = "default_blob_classes")]
    pub classes: usize,
    #[serde(default = "default_blob_per_class")]
    pub per_class: usize,
    #[serde(default = "default_blob_dim")]
    pub dim: usize,
    #[serde(default = "default_blob_sep")]
    pub separation: f32,
    #[serde(default = "default_blob_test")]
    pub test_per_class: usize,
}

fn default_blob_classes() -> usize {
    4
}

fn default_blob_per_class() -> usize {
    200
}

fn default_blob_dim() -> usize {
    16
}

fn default_blob_sep() -> f32 {
    4.0
}

fn default_blob_test() -> usize {
    40
}

impl Default for BlobsCfg {
    fn default() -> Self {
        BlobsCfg {
            classes: default_blob_classes(),
            per_class: default_blob_per_class(),
            dim: default_blob_dim(),
            separation: default_blob_sep(),
            test_per_class: default_blob_test(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimCfg {
    /// "sgd" or "adam".
    #[serde(default = "default_opt_name")]
    pub name: String,
    #[serde(default = "default_lr")]
    pub lr: f32,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_adam_eps")]
    pub eps: f32,
}

fn default_opt_name() -> String {
    String::from("sgd")
}

fn default_lr() -> f32 {
    0.1
}

fn default_momentum() -> f32 {
    0.9
}

fn default_beta1() -> f32 {
    0.9
}

fn default_beta2() -> f32 {
    0.999
}

fn default_adam_eps() -> f32 {
    1e-8
}

impl Default for OptimCfg {
    fn default() -> Self {
        OptimCfg {
            name: default_opt_name(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

impl TrainConfig {
    /// Library defaults for a given model and dataset name; drivers that
    /// construct runs programmatically start here and adjust fields.
    pub fn default_for(model: &str, dataset: &str) -> TrainConfig {
        TrainConfig {
            model: String::from(model),
            mode: default_mode(),
            dataset: DatasetCfg {
                name: String::from(dataset),
                data_dir: None,
                subset: None,
                blobs: None,
            },
            epochs: default_epochs(),
            batch_size: default_batch(),
            optimizer: OptimCfg::default(),
            schedule: default_schedule(),
            seed: 0,
            augment: false,
            out_dir: default_out_dir(),
            shadow_precision: false,
        }
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Applies `train` subcommand flag overrides.
    pub fn apply_overrides(&mut self, mode: Option<&str>, seed: Option<u64>) {
        if let Some(m) = mode {
            self.mode = String::from(m);
        }
        if let Some(s) = seed {
            self.seed = s;
        }
    }

    pub fn product_mode(&self) -> Result<ProductMode> {
        self.mode
            .parse()
            .map_err(|_| anyhow::anyhow!("unknown product mode {:?}", self.mode))
    }

    /// Resolves the model name against the dataset's example shape and
    /// class count. "mlp" keeps the fixed 256-wide four-hidden-layer stack,
    /// "linear" is a single product layer, "cnn-small" needs 32x32 images.
    pub fn model_cfg(&self, image_shape: &[usize], classes: usize) -> Result<ModelCfg> {
        let input: usize = image_shape.iter().product();
        match self.model.as_str() {
            "mlp" => Ok(ModelCfg::Mlp {
                input,
                hidden: vec![256, 256, 256, 256],
                classes,
            }),
            "linear" => Ok(ModelCfg::Mlp {
                input,
                hidden: Vec::new(),
                classes,
            }),
            "cnn-small" => {
                if image_shape.len() != 3 || image_shape[1] != 32 || image_shape[2] != 32 {
                    bail!(
                        "model \"cnn-small\" needs c x 32 x 32 inputs, dataset examples have shape {image_shape:?}"
                    );
                }
                Ok(ModelCfg::CnnSmall {
                    in_channels: image_shape[0],
                    classes,
                })
            }
            other => bail!("unknown model {other:?} (expected \"mlp\", \"linear\", or \"cnn-small\")"),
        }
    }

    /// Checks every invariant that can be checked without loading data:
    /// counts, known names, and the existence of referenced paths. Runs
    /// before any training work so bad configs fail fast.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            bail!("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            bail!("batch_size must be at least 1");
        }
        self.product_mode()?;
        match self.model.as_str() {
            "mlp" | "linear" | "cnn-small" => {}
            other => bail!("unknown model {other:?} (expected \"mlp\", \"linear\", or \"cnn-small\")"),
        }
        match self.schedule.as_str() {
            "cosine" | "constant" => {}
            other => bail!("unknown schedule {other:?} (expected \"cosine\" or \"constant\")"),
        }
        match self.optimizer.name.as_str() {
            "sgd" | "adam" => {}
            other => bail!("unknown optimizer {other:?} (expected \"sgd\" or \"adam\")"),
        }
        if self.optimizer.lr.is_nan() || self.optimizer.lr <= 0.0 {
            bail!("learning rate must be positive");
        }
        match self.dataset.name.as_str() {
            "fashion-mnist" | "cifar10" => {
                let dir = self
                    .dataset
                    .data_dir
                    .as_ref()
                    .ok_or_else(|| anyhow::anyhow!("dataset {:?} needs data_dir", self.dataset.name))?;
                if !dir.is_dir() {
                    bail!("data_dir {} does not exist", dir.display());
                }
            }
            "blobs" => {}
            other => bail!(
                "unknown dataset {other:?} (expected \"fashion-mnist\", \"cifar10\", or \"blobs\")"
            ),
        }
        if self.augment && self.model != "cnn-small" {
            bail!("augment requires 32x32 image inputs (model \"cnn-small\")");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn minimal_json() -> &'static str {
        r#"{ "dataset": { "name": "blobs" } }"#
    }

    #[test]
    fn defaults_fill_in() {
        let cfg: TrainConfig = serde_json::from_str(minimal_json()).unwrap();
        assert_eq!(cfg.model, "mlp");
        assert_eq!(cfg.mode, "P");
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.schedule, "cosine");
        assert_eq!(cfg.optimizer.name, "sgd");
        assert!((cfg.optimizer.lr - 0.1).abs() < 1e-9);
        assert!((cfg.optimizer.momentum - 0.9).abs() < 1e-9);
        assert_eq!(cfg.optimizer.weight_decay, 0.0);
        assert!(!cfg.augment);
        assert!(!cfg.shadow_precision);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let bad = r#"{ "dataset": { "name": "blobs" }, "lerning_rate": 0.1 }"#;
        assert!(serde_json::from_str::<TrainConfig>(bad).is_err());
    }

    #[test]
    fn overrides_replace_mode_and_seed() {
        let mut cfg: TrainConfig = serde_json::from_str(minimal_json()).unwrap();
        cfg.apply_overrides(Some("PR"), Some(99));
        assert_eq!(cfg.mode, "PR");
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.product_mode().unwrap(), ProductMode::PR);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg: TrainConfig = serde_json::from_str(minimal_json()).unwrap();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());

        let mut cfg: TrainConfig = serde_json::from_str(minimal_json()).unwrap();
        cfg.mode = String::from("QR");
        assert!(cfg.validate().is_err());

        let mut cfg: TrainConfig = serde_json::from_str(minimal_json()).unwrap();
        cfg.dataset.name = String::from("fashion-mnist");
        cfg.dataset.data_dir = Some(PathBuf::from("/definitely/not/here"));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn from_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        let mut f = std::fs::File::create(&path).unwrap();
        write!(f, "{}", minimal_json()).unwrap();
        let cfg = TrainConfig::from_file(&path).unwrap();
        assert_eq!(cfg.dataset.name, "blobs");
        assert!(TrainConfig::from_file(&dir.path().join("absent.json")).is_err());
    }
}
