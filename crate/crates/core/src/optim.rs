//! Optimizers and the cosine schedule.
//!
//! Updates read each parameter's populated `grad` buffer and are pure given
//! (params, grads, state): the same inputs produce bitwise-identical
//! outputs, which the training determinism contract relies on.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// SGD with classical momentum and decoupled-in-the-velocity weight decay:
/// v <- beta*v + g + lambda*p, then p <- p - lr*v.
#[derive(Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32, weight_decay: f32) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    /// One update over the full parameter list; the list must keep a stable
    /// order across steps because state buffers are positional.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::invalid("optimizer state does not match parameter list"));
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let g = p
                .grad()
                .ok_or_else(|| Error::invalid("sgd step requires populated gradients"))?;
            if g.len() != v.len() {
                return Err(Error::ShapeMismatch {
                    op: "sgd-step",
                    lhs: vec![v.len()],
                    rhs: vec![g.len()],
                });
            }
            let (beta, lambda, lr) = (self.momentum, self.weight_decay, self.lr);
            // Borrow order: compute velocity from (grad, data), then write data.
            let data_snapshot: Vec<f32> = p.data().to_vec();
            for i in 0..v.len() {
                v[i] = beta * v[i] + g[i] + lambda * data_snapshot[i];
            }
            let data = p.data_mut();
            for i in 0..v.len() {
                data[i] -= lr * v[i];
            }
        }
        Ok(())
    }
}

/// Bias-corrected Adam. Weight decay, when nonzero, is added to the raw
/// gradient before the moment updates.
#[derive(Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32, eps: f32, weight_decay: f32) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn with_defaults(lr: f32) -> Self {
        Adam::new(lr, 0.9, 0.999, 1e-8, 0.0)
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.m.len() != params.len() {
            return Err(Error::invalid("optimizer state does not match parameter list"));
        }
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1 as f64, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2 as f64, self.t as f64);
        for ((p, m), v) in params.iter_mut().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let g = p
                .grad()
                .ok_or_else(|| Error::invalid("adam step requires populated gradients"))?;
            if g.len() != m.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam-step",
                    lhs: vec![m.len()],
                    rhs: vec![g.len()],
                });
            }
            let gd: Vec<f32> = if self.weight_decay != 0.0 {
                g.iter()
                    .zip(p.data())
                    .map(|(gi, pi)| gi + self.weight_decay * pi)
                    .collect()
            } else {
                g.to_vec()
            };
            let data = p.data_mut();
            for i in 0..m.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gd[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mhat = m[i] as f64 / bc1;
                let vhat = v[i] as f64 / bc2;
                data[i] -= (self.lr as f64 * mhat / (math::sqrt64(vhat) + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

/// Cosine annealing from lr0 at step 0 to 0 at step == total_steps.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f32) -> Result<f32> {
    if total_steps == 0 {
        return Err(Error::invalid("cosine_lr: total_steps must be positive"));
    }
    if step > total_steps {
        return Err(Error::invalid("cosine_lr: step beyond total_steps"));
    }
    let phase = core::f64::consts::PI * step as f64 / total_steps as f64;
    Ok((lr0 as f64 * (1.0 + math::cos64(phase)) / 2.0) as f32)
}
