//! The training loop: one seeded run from config to metrics history, angle
//! statistics, and checkpoint. `train`, the ablation driver, and the CIFAR
//! harness all go through `run` or `train_with_data`.

use std::path::PathBuf;
use std::time::Instant;

use anyhow::{anyhow, bail, Result};
use prgrad_core::angle::{angle_stats, AngleEntry, PairSet};
use prgrad_core::data::{augment_pad_crop_flip, make_batches, Dataset};
use prgrad_core::model::{build_model, Model, Tap};
use prgrad_core::optim::{cosine_lr, Adam, Sgd};
use prgrad_core::{rng, verify, ProductMode, Tape, Tensor};

use crate::checkpoint::{self, ModelSidecar};
use crate::config::TrainConfig;
use crate::datasets::{load_dataset, LoadedData};
use crate::emit::{self, MetricsRecord};

/// Everything a finished run leaves behind, in memory. The same data is on
/// disk under `out_dir` (metrics.csv, angles.csv, checkpoint.prnet,
/// model.json).
pub struct RunOutput {
    pub metrics: Vec<MetricsRecord>,
    pub angles: Vec<(usize, AngleEntry)>,
    /// Test accuracy at initialization, before the first update. Kept out
    /// of metrics.csv, whose epochs are contiguous from 1; runs that share
    /// a seed share this value bitwise regardless of mode because the
    /// forward pass is mode-independent in value.
    pub initial_test_acc: f64,
    pub final_test_acc: f64,
    pub out_dir: PathBuf,
}

enum Opt {
    Sgd(Sgd),
    Adam(Adam),
}

impl Opt {
    fn from_config(cfg: &TrainConfig) -> Result<Opt> {
        let o = &cfg.optimizer;
        match o.name.as_str() {
            "sgd" => Ok(Opt::Sgd(Sgd::new(o.lr, o.momentum, o.weight_decay))),
            "adam" => Ok(Opt::Adam(Adam::new(o.lr, o.beta1, o.beta2, o.eps, o.weight_decay))),
            other => bail!("unknown optimizer {other:?}"),
        }
    }

    fn set_lr(&mut self, lr: f32) {
        match self {
            Opt::Sgd(s) => s.set_lr(lr),
            Opt::Adam(a) => a.set_lr(lr),
        }
    }

    fn step(&mut self, params: &mut [Tensor]) -> prgrad_core::Result<()> {
        match self {
            Opt::Sgd(s) => s.step(params),
            Opt::Adam(a) => a.step(params),
        }
    }
}

/// Loads the dataset named by the config and trains. The full entry point
/// behind `prgrad train`.
pub fn run(cfg: &TrainConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let data = load_dataset(&cfg.dataset, cfg.seed)?;
    train_with_data(cfg, &data)
}

/// Trains on already-loaded data. Drivers that reuse one dataset across
/// several runs (ablation, CIFAR seeds) call this directly.
pub fn train_with_data(cfg: &TrainConfig, data: &LoadedData) -> Result<RunOutput> {
    cfg.validate()?;
    let mode = cfg.product_mode()?;
    let model_cfg = cfg.model_cfg(&data.train.image_shape, data.train.num_classes)?;
    let mut model = build_model(&model_cfg, mode, cfg.seed)?;

    if cfg.shadow_precision {
        shadow_gate(mode, cfg.seed)?;
    }

    let mut opt = Opt::from_config(cfg)?;
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let image_numel = data.train.image_numel();
    let channels = data.train.image_shape.first().copied().unwrap_or(1);

    let initial_test_acc = evaluate(&mut model, &data.test, cfg.batch_size)?;

    let started = Instant::now();
    let mut metrics: Vec<MetricsRecord> = Vec::with_capacity(cfg.epochs);
    let mut angles: Vec<(usize, AngleEntry)> = Vec::new();
    let mut global_step = 0usize;
    for epoch in 1..=cfg.epochs {
        let epoch_seed = cfg.seed.wrapping_add(epoch as u64);
        let mut aug_rng = rng::seeded_stream(epoch_seed, rng::STREAM_AUG);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut lr = cfg.optimizer.lr;
        for (mut xb, yb) in make_batches(&data.train, cfg.batch_size, epoch_seed, true)? {
            if cfg.augment {
                xb = augment_batch(&xb, image_numel, channels, &mut aug_rng)?;
            }
            let n = yb.len();
            let mut tape = Tape::new();
            let params = model.watch_params(&mut tape);
            let x = tape.constant(batch_shape(&model, n), xb)?;
            let fwd = model.forward(&mut tape, &params, x, false)?;
            let loss = tape.cross_entropy_logits(fwd.logits, &yb)?;
            let loss_val = tape.value(loss)[0];
            if !loss_val.is_finite() {
                bail!("non-finite loss ({loss_val}) at step {global_step}, epoch {epoch}");
            }
            loss_sum += loss_val as f64 * n as f64;
            correct += count_correct(tape.value(fwd.logits), &yb);
            seen += n;

            let mut grads = tape.backward(loss)?;
            for (p, v) in model.params.iter_mut().zip(&params) {
                let g = grads
                    .take(*v)
                    .ok_or_else(|| anyhow!("parameter received no gradient"))?;
                p.set_grad(g)?;
            }
            lr = match cfg.schedule.as_str() {
                "cosine" => cosine_lr(global_step, total_steps, cfg.optimizer.lr)?,
                _ => cfg.optimizer.lr,
            };
            opt.set_lr(lr);
            opt.step(&mut model.params)?;
            global_step += 1;
        }

        let test_acc = evaluate(&mut model, &data.test, cfg.batch_size)?;
        for entry in epoch_angle_stats(&mut model, &data.test, cfg.batch_size)? {
            angles.push((epoch, entry));
        }
        let record = MetricsRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_acc,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        };
        println!(
            "epoch {:>3}: train_loss {:.4} train_acc {:.4} test_acc {:.4} lr {:.5} ({:.1}s)",
            record.epoch, record.train_loss, record.train_acc, record.test_acc, record.lr, record.seconds
        );
        metrics.push(record);
    }

    emit::write_metrics(&cfg.out_dir.join("metrics.csv"), &metrics)?;
    emit::write_angles(&cfg.out_dir.join("angles.csv"), &angles)?;
    checkpoint::save(&cfg.out_dir.join("checkpoint.prnet"), &model.names, &model.params)?;
    checkpoint::save_sidecar(
        &cfg.out_dir.join("model.json"),
        &ModelSidecar {
            model: cfg.model.clone(),
            mode: String::from(mode.as_str()),
            dataset: cfg.dataset.name.clone(),
            seed: cfg.seed,
            channel_stats: data.channel_stats.clone(),
        },
    )?;

    let final_test_acc = metrics.last().map_or(initial_test_acc, |m| m.test_acc);
    Ok(RunOutput {
        metrics,
        angles,
        initial_test_acc,
        final_test_acc,
        out_dir: cfg.out_dir.clone(),
    })
}

fn batch_shape(model: &Model, n: usize) -> Vec<usize> {
    let mut shape = vec![n];
    shape.extend(model.cfg.input_shape());
    shape
}

/// Refuses to train when the 64-bit shadow oracles disagree with the tape
/// for this run's mode.
fn shadow_gate(mode: ProductMode, seed: u64) -> Result<()> {
    let reports = verify::gradcheck_suite(seed, &[2, 3, 16], &[mode]);
    if verify::all_pass(&reports) {
        return Ok(());
    }
    let failing: Vec<String> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{}/{}", r.case, r.parameter))
        .collect();
    bail!("shadow-precision gradient check failed: {}", failing.join(", "));
}

fn augment_batch(
    xb: &[f32],
    image_numel: usize,
    channels: usize,
    rng: &mut rng::ChaCha8Rng,
) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(xb.len());
    for img in xb.chunks_exact(image_numel) {
        out.extend_from_slice(&augment_pad_crop_flip(img, channels, rng)?);
    }
    Ok(out)
}

fn count_correct(logits: &[f32], labels: &[usize]) -> usize {
    let classes = logits.len() / labels.len();
    logits
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best == y
        })
        .count()
}

/// Top-1 accuracy over the whole dataset, batched and unshuffled.
pub fn evaluate(model: &mut Model, ds: &Dataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0usize;
    for (xb, yb) in make_batches(ds, batch_size, 0, false)? {
        let mut tape = Tape::new();
        let params = model.watch_params(&mut tape);
        let x = tape.constant(batch_shape(model, yb.len()), xb)?;
        let fwd = model.forward(&mut tape, &params, x, false)?;
        correct += count_correct(tape.value(fwd.logits), &yb);
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Angle statistics over one full evaluation batch with parameters frozen:
/// forward once with taps on, pair every layer's weight rows against its
/// input rows.
pub fn epoch_angle_stats(
    model: &mut Model,
    ds: &Dataset,
    batch_size: usize,
) -> Result<Vec<AngleEntry>> {
    let (xb, yb) = make_batches(ds, batch_size, 0, false)?
        .next()
        .ok_or_else(|| anyhow!("angle statistics need a non-empty evaluation set"))?;
    let mut tape = Tape::new();
    let params = model.watch_params(&mut tape);
    let x = tape.constant(batch_shape(model, yb.len()), xb)?;
    let fwd = model.forward(&mut tape, &params, x, true)?;
    let sets = taps_to_pair_sets(model, &tape, &fwd.taps)?;
    Ok(angle_stats(&sets)?)
}

fn taps_to_pair_sets(model: &Model, tape: &Tape, taps: &[Tap]) -> Result<Vec<PairSet>> {
    taps.iter()
        .map(|t| {
            let w = &model.params[t.param_index];
            let m = w.shape()[0];
            let d = w.numel() / m;
            let dshape = tape.shape(t.data);
            let n = dshape[0];
            let row: usize = dshape[1..].iter().product();
            if row != d {
                bail!(
                    "tap {} rows have width {row}, weight rows have width {d}",
                    t.layer
                );
            }
            Ok(PairSet {
                name: t.layer.clone(),
                w: w.data().to_vec(),
                m,
                x: tape.value(t.data).to_vec(),
                n,
                d,
            })
        })
        .collect()
}

/// Rebuilds a model from a checkpoint plus its sidecar, for `angle-stats`.
pub fn model_from_checkpoint(
    ckpt: &std::path::Path,
    sidecar: &ModelSidecar,
    image_shape: &[usize],
    classes: usize,
) -> Result<Model> {
    let tensors = checkpoint::load(ckpt)?;
    let mode: ProductMode = sidecar
        .mode
        .parse()
        .map_err(|_| anyhow!("sidecar names unknown mode {:?}", sidecar.mode))?;
    let mut cfg = crate::config::TrainConfig::default_for(&sidecar.model, &sidecar.dataset);
    cfg.mode = sidecar.mode.clone();
    let model_cfg = cfg.model_cfg(image_shape, classes)?;
    let mut model = build_model(&model_cfg, mode, 0)?;
    if tensors.len() != model.params.len() {
        bail!(
            "checkpoint holds {} tensors, model {:?} expects {}",
            tensors.len(),
            sidecar.model,
            model.params.len()
        );
    }
    for (name, tensor) in tensors {
        let idx = model
            .param_index(&name)
            .ok_or_else(|| anyhow!("checkpoint tensor {name:?} not in model"))?;
        if model.params[idx].shape() != tensor.shape() {
            bail!(
                "checkpoint tensor {name:?} has shape {:?}, model expects {:?}",
                tensor.shape(),
                model.params[idx].shape()
            );
        }
        model.params[idx] = tensor;
    }
    Ok(model)
}
