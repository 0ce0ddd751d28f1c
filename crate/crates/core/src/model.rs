//! Model builder: the 5-layer MLP and the small 6-conv CNN, with
//! deterministic seeded initialization and angle-statistic taps.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers;
use crate::product::ProductMode;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelCfg {
    /// input -> hidden... -> classes, ReLU between linear layers.
    Mlp {
        input: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
    /// Six 3x3 convs (widths 32-32-64-64-128-128, stride 2 entering the
    /// 64- and 128-wide stages), global average pool, linear classifier.
    CnnSmall { in_channels: usize, classes: usize },
}

impl ModelCfg {
    /// The 784-256-256-256-256-10 MLP used by the ablation experiment.
    pub fn mlp_default() -> ModelCfg {
        ModelCfg::Mlp {
            input: 784,
            hidden: vec![256, 256, 256, 256],
            classes: 10,
        }
    }

    pub fn cnn_default() -> ModelCfg {
        ModelCfg::CnnSmall {
            in_channels: 3,
            classes: 10,
        }
    }

    /// Shape of one input example.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            ModelCfg::Mlp { input, .. } => vec![*input],
            ModelCfg::CnnSmall { in_channels, .. } => vec![*in_channels, 32, 32],
        }
    }
}

const CNN_WIDTHS: [usize; 6] = [32, 32, 64, 64, 128, 128];
const CNN_STRIDES: [usize; 6] = [1, 1, 2, 1, 2, 1];

/// A built model: named parameter tensors in forward order plus the config
/// needed to rebuild its graph on a fresh tape each step.
#[derive(Debug)]
pub struct Model {
    pub cfg: ModelCfg,
    pub mode: ProductMode,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
}

/// Result of one forward pass: class logits and, when requested, the
/// (layer name, weight index, data var) taps whose pairs the angle
/// statistics inspect. For conv layers the data var holds im2col rows.
pub struct ForwardPass {
    pub logits: Var,
    pub taps: Vec<Tap>,
}

pub struct Tap {
    pub layer: String,
    pub param_index: usize,
    pub data: Var,
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Registers every parameter on a fresh tape; call once per step.
    pub fn watch_params(&mut self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .iter_mut()
            .map(|p| tape.watch(p, true))
            .collect()
    }

    /// Builds the forward graph for a batch already on the tape. `x` is
    /// [n, input] for MLPs and [n, c, 32, 32] for the CNN.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        collect_taps: bool,
    ) -> Result<ForwardPass> {
        if params.len() != self.params.len() {
            return Err(Error::invalid("forward: wrong parameter handle count"));
        }
        let mut taps = Vec::new();
        let mut tap = |layer: &str, param_index: usize, data: Var| {
            if collect_taps {
                taps.push(Tap {
                    layer: String::from(layer),
                    param_index,
                    data,
                });
            }
        };
        let logits = match &self.cfg {
            ModelCfg::Mlp { hidden, .. } => {
                let layer_count = hidden.len() + 1;
                let mut h = x;
                for layer in 0..layer_count {
                    let name = format!("fc{}", layer + 1);
                    tap(&name, 2 * layer, h);
                    let w = params[2 * layer];
                    let b = params[2 * layer + 1];
                    h = layers::linear(tape, h, w, Some(b), self.mode)?;
                    if layer + 1 < layer_count {
                        h = tape.relu(h)?;
                    }
                }
                h
            }
            ModelCfg::CnnSmall { .. } => {
                let mut h = x;
                for (layer, stride) in CNN_STRIDES.iter().enumerate() {
                    let name = format!("conv{}", layer + 1);
                    let k = params[2 * layer];
                    let b = params[2 * layer + 1];
                    let (out, cols) =
                        layers::conv2d_with_cols(tape, h, k, Some(b), *stride, 1, self.mode)?;
                    tap(&name, 2 * layer, cols);
                    h = tape.relu(out)?;
                }
                // Global average pool: [n, c, h, w] -> [n, c].
                let shape = tape.shape(h).to_vec();
                let [n, c, hh, ww] = shape[..] else {
                    return Err(Error::invalid("cnn forward lost its 4-d shape"));
                };
                let flat = tape.reshape(h, vec![n, c, hh * ww])?;
                let pooled = tape.mean_axis(flat, 2)?;
                let w = params[12];
                let b = params[13];
                tap("fc", 12, pooled);
                layers::linear(tape, pooled, w, Some(b), self.mode)?
            }
        };
        Ok(ForwardPass { logits, taps })
    }
}

fn push_linear(
    rng: &mut rand_chacha::ChaCha8Rng,
    names: &mut Vec<String>,
    params: &mut Vec<Tensor>,
    name: &str,
    out_dim: usize,
    in_dim: usize,
) {
    let mut w = vec![0.0f32; out_dim * in_dim];
    rng::fill_uniform_fan_in(rng, &mut w, in_dim);
    names.push(format!("{name}.w"));
    params.push(Tensor::new(vec![out_dim, in_dim], w).expect("sized above"));
    names.push(format!("{name}.b"));
    params.push(Tensor::zeros(vec![out_dim]));
}

fn push_conv(
    rng: &mut rand_chacha::ChaCha8Rng,
    names: &mut Vec<String>,
    params: &mut Vec<Tensor>,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
) {
    let fan_in = c_in * k * k;
    let mut kernel = vec![0.0f32; c_out * fan_in];
    rng::fill_kaiming_normal(rng, &mut kernel, fan_in);
    names.push(format!("{name}.k"));
    params.push(Tensor::new(vec![c_out, c_in, k, k], kernel).expect("sized above"));
    names.push(format!("{name}.b"));
    params.push(Tensor::zeros(vec![c_out]));
}

/// Deterministic build: the same (cfg, mode, seed) yields bitwise-identical
/// parameters. Linear layers use uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// convs use Kaiming normal, biases start at zero.
pub fn build_model(cfg: &ModelCfg, mode: ProductMode, seed: u64) -> Result<Model> {
    let mut r = rng::seeded_stream(seed, rng::STREAM_INIT);
    let mut names = Vec::new();
    let mut params = Vec::new();
    match cfg {
        ModelCfg::Mlp {
            input,
            hidden,
            classes,
        } => {
            if *input == 0 || *classes == 0 || hidden.contains(&0) {
                return Err(Error::invalid("mlp dimensions must be positive"));
            }
            let mut dims = vec![*input];
            dims.extend_from_slice(hidden);
            dims.push(*classes);
            for i in 0..dims.len() - 1 {
                push_linear(
                    &mut r,
                    &mut names,
                    &mut params,
                    &format!("fc{}", i + 1),
                    dims[i + 1],
                    dims[i],
                );
            }
        }
        ModelCfg::CnnSmall {
            in_channels,
            classes,
        } => {
            if *in_channels == 0 || *classes == 0 {
                return Err(Error::invalid("cnn dimensions must be positive"));
            }
            let mut c_in = *in_channels;
            for (i, &c_out) in CNN_WIDTHS.iter().enumerate() {
                push_conv(
                    &mut r,
                    &mut names,
                    &mut params,
                    &format!("conv{}", i + 1),
                    c_out,
                    c_in,
                    3,
                );
                c_in = c_out;
            }
            push_linear(&mut r, &mut names, &mut params, "fc", *classes, c_in);
        }
    }
    Ok(Model {
        cfg: cfg.clone(),
        mode,
        names,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_mlp_parameter_count() {
        // 784*256+256 + 3*(256*256+256) + 256*10+10.
        let m = build_model(&ModelCfg::mlp_default(), ProductMode::P, 1).unwrap();
        assert_eq!(m.param_count(), 400_906);
        assert_eq!(m.names.len(), 10);
        assert_eq!(m.names[0], "fc1.w");
        assert_eq!(m.names[9], "fc5.b");
    }

    #[test]
    fn default_cnn_parameter_count() {
        let m = build_model(&ModelCfg::cnn_default(), ProductMode::PR, 1).unwrap();
        assert_eq!(m.param_count(), 288_298);
        assert_eq!(m.names.len(), 14);
        assert_eq!(m.param_index("conv6.k"), Some(10));
        assert_eq!(m.param_index("fc.w"), Some(12));
    }

    #[test]
    fn same_seed_is_bitwise_identical_and_mode_independent() {
        let a = build_model(&ModelCfg::mlp_default(), ProductMode::P, 7).unwrap();
        let b = build_model(&ModelCfg::mlp_default(), ProductMode::PR, 7).unwrap();
        let c = build_model(&ModelCfg::mlp_default(), ProductMode::P, 8).unwrap();
        for (ta, tb) in a.params.iter().zip(&b.params) {
            assert_eq!(ta.data(), tb.data());
        }
        assert_ne!(a.params[0].data(), c.params[0].data());
    }

    fn forward_logits(model: &mut Model, x: &[f32], batch: usize) -> Vec<f32> {
        let mut tape = Tape::new();
        let params = model.watch_params(&mut tape);
        let mut shape = vec![batch];
        shape.extend(model.cfg.input_shape());
        let xv = tape.leaf(shape, x.to_vec(), false).unwrap();
        let pass = model.forward(&mut tape, &params, xv, false).unwrap();
        tape.value(pass.logits).to_vec()
    }

    #[test]
    fn mode_toggle_preserves_initial_mlp_logits() {
        let cfg = ModelCfg::Mlp {
            input: 12,
            hidden: vec![16, 16, 16, 16],
            classes: 4,
        };
        let mut p = build_model(&cfg, ProductMode::P, 3).unwrap();
        let mut pr = build_model(&cfg, ProductMode::PR, 3).unwrap();
        let mut r = crate::rng::seeded(5);
        let mut x = vec![0.0f32; 6 * 12];
        crate::rng::fill_uniform_fan_in(&mut r, &mut x, 12);
        let lp = forward_logits(&mut p, &x, 6);
        let lpr = forward_logits(&mut pr, &x, 6);
        let max_diff = lp
            .iter()
            .zip(&lpr)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff <= 1e-5, "max diff {max_diff}");
    }

    #[test]
    fn cnn_forward_shapes_and_taps() {
        let mut m = build_model(&ModelCfg::cnn_default(), ProductMode::PR, 11).unwrap();
        let mut r = crate::rng::seeded(2);
        let mut x = vec![0.0f32; 2 * 3 * 32 * 32];
        crate::rng::fill_uniform_fan_in(&mut r, &mut x, 96);
        let mut tape = Tape::new();
        let params = m.watch_params(&mut tape);
        let xv = tape.leaf(vec![2, 3, 32, 32], x, false).unwrap();
        let pass = m.forward(&mut tape, &params, xv, true).unwrap();
        assert_eq!(tape.shape(pass.logits), &[2, 10]);
        assert_eq!(pass.taps.len(), 7);
        assert_eq!(pass.taps[0].layer, "conv1");
        // conv1 tap rows: batch * 32 * 32 positions, 27-wide windows.
        assert_eq!(tape.shape(pass.taps[0].data), &[2 * 32 * 32, 27]);
        // conv3 runs at stride 2: 16x16 output positions.
        assert_eq!(tape.shape(pass.taps[2].data), &[2 * 16 * 16, 32 * 9]);
        assert_eq!(pass.taps[6].layer, "fc");
        assert_eq!(tape.shape(pass.taps[6].data), &[2, 128]);
    }

    #[test]
    fn mlp_taps_name_every_layer() {
        let cfg = ModelCfg::Mlp {
            input: 6,
            hidden: vec![5, 4],
            classes: 3,
        };
        let mut m = build_model(&cfg, ProductMode::P, 1).unwrap();
        let mut tape = Tape::new();
        let params = m.watch_params(&mut tape);
        let xv = tape.leaf(vec![2, 6], vec![0.1; 12], false).unwrap();
        let pass = m.forward(&mut tape, &params, xv, true).unwrap();
        let names: Vec<&str> = pass.taps.iter().map(|t| t.layer.as_str()).collect();
        assert_eq!(names, ["fc1", "fc2", "fc3"]);
        assert_eq!(pass.taps[1].param_index, 2);
    }

    #[test]
    fn invalid_dims_are_rejected() {
        let cfg = ModelCfg::Mlp {
            input: 0,
            hidden: vec![4],
            classes: 2,
        };
        assert!(build_model(&cfg, ProductMode::P, 1).is_err());
    }
}
