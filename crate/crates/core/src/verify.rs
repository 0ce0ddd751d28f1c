//! Independent gradient oracles.
//!
//! Everything here recomputes values from the vector definitions in f64,
//! sharing no code path with the coefficient-form backward in `product` or
//! with the tape. The key device is the frozen-coefficient forward: each
//! product's detached factors (|sin theta|, cos theta, the R sign, the
//! ablation constants) are captured once at the base point, after which the
//! surviving expression is an ordinary differentiable function whose finite
//! differences must match the shipped custom gradients.
//!
//! `FrozenTable` extends the device to whole layers: a recording pass
//! captures coefficients per product call in order, and replay re-evaluates
//! the layer under perturbed inputs against the same frozen table, so
//! finite differences through deep compositions stay meaningful.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::layers;
use crate::math::{sqrt64, EPS_NORM};
use crate::product::ProductMode;
use crate::rng;
use crate::tape::{Tape, Var};

/// Pairs with |sin theta| below this are excluded from oracle comparisons:
/// the rejection direction underlying the modified gradients is not
/// numerically identifiable there.
pub const ORACLE_MIN_ABS_SIN: f64 = 1e-4;

/// R-mode finite differences additionally exclude |cos theta| below this,
/// since the R sign flips across the orthogonal boundary.
pub const ORACLE_MIN_ABS_COS_R: f64 = 1e-3;

/// Default central-difference step for the f64 oracles.
pub const ORACLE_EPS: f64 = 1e-5;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    sqrt64(dot(a, a))
}

fn sigmoid64(z: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-z))
}

/// Unit-rejection norm of x off w; returns ||x - proj_w(x)||.
fn rejection_norm(w: &[f64], x: &[f64]) -> f64 {
    let nw2 = dot(w, w).max(EPS_NORM * EPS_NORM);
    let a = dot(w, x) / nw2;
    let mut s = 0.0;
    for i in 0..w.len() {
        let r = x[i] - a * w[i];
        s += r * r;
    }
    sqrt64(s)
}

fn cos_between(w: &[f64], x: &[f64]) -> f64 {
    (dot(w, x) / (norm(w) * norm(x)).max(EPS_NORM)).clamp(-1.0, 1.0)
}

/// Product forward with its non-differentiated factors pinned at a base
/// point. For P nothing is detached; for R only the sign is.
#[derive(Debug, Clone)]
pub enum Frozen {
    P,
    Pr {
        abs_sin: f64,
        cos: f64,
    },
    R {
        sign_cos: f64,
    },
    /// value = ||w|| * scale + <w0, x> - d0 reproduces the length-only
    /// gradient split: w moves only along its own direction, x sees w0.
    PLengthOnly {
        scale: f64,
        w0: Vec<f64>,
        d0: f64,
    },
    /// value = norm_w0 * <w, x> / ||w||: direction-only updates for w.
    PDirectionOnly {
        norm_w0: f64,
    },
}

impl Frozen {
    /// Captures the detached factors of `mode` at the base pair (w, x).
    pub fn at(mode: ProductMode, w: &[f64], x: &[f64]) -> Frozen {
        match mode {
            ProductMode::P => Frozen::P,
            ProductMode::PR => {
                let cos = cos_between(w, x);
                Frozen::Pr {
                    abs_sin: sqrt64((1.0 - cos * cos).max(0.0)),
                    cos,
                }
            }
            ProductMode::R => Frozen::R {
                sign_cos: if dot(w, x) >= 0.0 { 1.0 } else { -1.0 },
            },
            ProductMode::PLengthOnly => Frozen::PLengthOnly {
                scale: dot(w, x) / norm(w).max(EPS_NORM),
                w0: w.to_vec(),
                d0: dot(w, x),
            },
            ProductMode::PDirectionOnly => Frozen::PDirectionOnly { norm_w0: norm(w) },
        }
    }
}

/// Evaluates the frozen forward at (w, x). At the base pair this equals the
/// mode's true forward value; its gradient there is the mode's custom
/// gradient.
pub fn frozen_value(f: &Frozen, w: &[f64], x: &[f64]) -> f64 {
    match f {
        Frozen::P => dot(w, x),
        Frozen::Pr { abs_sin, cos } => {
            let (nw, nx) = (norm(w), norm(x));
            let c_live = (dot(w, x) / (nw * nx).max(EPS_NORM)).clamp(-1.0, 1.0);
            let s_live = sqrt64((1.0 - c_live * c_live).max(0.0));
            // 1 - s = c^2 / (1 + s): identical in exact arithmetic but free
            // of the near-orthogonal cancellation, which otherwise dominates
            // the finite differences of small gradient entries.
            let one_minus_s = c_live * c_live / (1.0 + s_live);
            nw * nx * (abs_sin * c_live + cos * one_minus_s)
        }
        Frozen::R { sign_cos } => sign_cos * r_magnitude(w, x),
        Frozen::PLengthOnly { scale, w0, d0 } => norm(w) * scale + dot(w0, x) - d0,
        Frozen::PDirectionOnly { norm_w0 } => norm_w0 * dot(w, x) / norm(w).max(EPS_NORM),
    }
}

/// |w| * (|x| - |R_x|) evaluated as dot^2 / (|w| * (|x| + |R_x|)), which is
/// the same quantity without subtracting two nearly equal norms.
fn r_magnitude(w: &[f64], x: &[f64]) -> f64 {
    let d = dot(w, x);
    let nw = norm(w);
    let nx = norm(x);
    let nrx = rejection_norm(w, x);
    d * d / (nw * (nx + nrx)).max(EPS_NORM)
}

/// The true (unfrozen) R forward; used when differencing R against itself
/// away from the sign boundary.
pub fn r_true_value(w: &[f64], x: &[f64]) -> f64 {
    let sign = if dot(w, x) >= 0.0 { 1.0 } else { -1.0 };
    sign * r_magnitude(w, x)
}

/// Central finite differences of a scalar function, one probe per
/// coordinate. Fails on non-finite function values.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let keep = probe[i];
        probe[i] = keep + eps;
        let fp = f(&probe);
        probe[i] = keep - eps;
        let fm = f(&probe);
        probe[i] = keep;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff: non-finite value at coordinate {i}"
            )));
        }
        grad.push((fp - fm) / (2.0 * eps));
    }
    Ok(grad)
}

/// Which argument of the product a gradient is taken with respect to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wrt {
    W,
    X,
}

/// Finite differences of the frozen PR forward, the independent oracle for
/// the modified gradient. Near-parallel pairs are a skip signal, not a
/// failure: returns `DegeneratePair`.
pub fn frozen_coeff_oracle(w: &[f64], x: &[f64], wrt: Wrt, eps: f64) -> Result<Vec<f64>> {
    oracle_grad(ProductMode::PR, w, x, wrt, eps)
}

/// Oracle gradients for any mode. PR and the ablations difference their
/// frozen forms; P and R are honest functions and are differenced directly.
/// Degenerate geometry (and, for R, near-orthogonality) yields
/// `DegeneratePair` so callers can skip.
pub fn oracle_grad(
    mode: ProductMode,
    w: &[f64],
    x: &[f64],
    wrt: Wrt,
    eps: f64,
) -> Result<Vec<f64>> {
    let (nw, nx) = (norm(w), norm(x));
    if nw < EPS_NORM || nx < EPS_NORM {
        return Err(Error::DegeneratePair);
    }
    let cos = cos_between(w, x);
    let abs_sin = sqrt64((1.0 - cos * cos).max(0.0));
    if abs_sin < ORACLE_MIN_ABS_SIN {
        return Err(Error::DegeneratePair);
    }
    if mode == ProductMode::R && cos.abs() < ORACLE_MIN_ABS_COS_R {
        return Err(Error::DegeneratePair);
    }
    let value = |wp: &[f64], xp: &[f64]| -> f64 {
        if mode == ProductMode::R {
            r_true_value(wp, xp)
        } else {
            let frozen = Frozen::at(mode, w, x);
            frozen_value(&frozen, wp, xp)
        }
    };
    match wrt {
        Wrt::W => finite_diff(|wp| value(wp, x), w, eps),
        Wrt::X => finite_diff(|xp| value(w, xp), x, eps),
    }
}

/// Ordered log of frozen per-call coefficients through a composite f64
/// forward. Record once at the base point, then `replay` and `rewind` to
/// re-evaluate under perturbations with the same detached factors.
#[derive(Debug)]
pub struct FrozenTable {
    mode: ProductMode,
    entries: Vec<Frozen>,
    cursor: usize,
    recording: bool,
}

impl FrozenTable {
    pub fn new(mode: ProductMode) -> Self {
        FrozenTable {
            mode,
            entries: Vec::new(),
            cursor: 0,
            recording: true,
        }
    }

    /// Ends recording; subsequent passes consume the log from the start.
    pub fn replay(&mut self) {
        self.recording = false;
        self.cursor = 0;
    }

    /// Restarts the current replay pass.
    pub fn rewind(&mut self) {
        self.cursor = 0;
    }

    /// One product evaluation. Calls must occur in the same order in every
    /// pass; the reference layers below guarantee this by construction.
    pub fn product(&mut self, w: &[f64], x: &[f64]) -> f64 {
        if self.recording {
            let f = Frozen::at(self.mode, w, x);
            let v = frozen_value(&f, w, x);
            self.entries.push(f);
            v
        } else {
            let f = &self.entries[self.cursor];
            self.cursor += 1;
            frozen_value(f, w, x)
        }
    }
}

/// f64 reference linear layer: x is n x d, w is m x d, out is n x m.
/// Plain loops; every contraction goes through the table.
pub fn ref_linear(
    table: &mut FrozenTable,
    x: &[f64],
    n: usize,
    d: usize,
    w: &[f64],
    m: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for b in 0..n {
        for o in 0..m {
            let mut v = table.product(&w[o * d..(o + 1) * d], &x[b * d..(b + 1) * d]);
            if let Some(bias) = bias {
                v += bias[o];
            }
            out[b * m + o] = v;
        }
    }
    out
}

/// f64 reference convolution by direct sliding window (no im2col). x is
/// batch x c x h x w flattened, kernel is co x (c*k1*k2), out is
/// batch x co x oh x ow.
pub fn ref_conv2d(
    table: &mut FrozenTable,
    x: &[f64],
    batch: usize,
    geom: &ConvGeom,
    kernel: &[f64],
    co: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (c, h, w) = (geom.in_c, geom.in_h, geom.in_w);
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let ck = geom.cols();
    let mut out = vec![0.0; batch * co * oh * ow];
    let mut window = vec![0.0f64; ck];
    for b in 0..batch {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut idx = 0;
                    for ci in 0..c {
                        for ki in 0..geom.k1 {
                            for kj in 0..geom.k2 {
                                let iy = (oy * geom.stride + ki) as isize - geom.padding as isize;
                                let ix = (ox * geom.stride + kj) as isize - geom.padding as isize;
                                window[idx] = if iy >= 0
                                    && (iy as usize) < h
                                    && ix >= 0
                                    && (ix as usize) < w
                                {
                                    x[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                } else {
                                    0.0
                                };
                                idx += 1;
                            }
                        }
                    }
                    let mut v = table.product(&kernel[o * ck..(o + 1) * ck], &window);
                    if let Some(bias) = bias {
                        v += bias[o];
                    }
                    out[((b * co + o) * oh + oy) * ow + ox] = v;
                }
            }
        }
    }
    out
}

/// f64 LSTM parameters in gate order i, f, g, o (matching `layers::LstmVars`).
#[derive(Debug, Clone)]
pub struct RefLstm {
    pub d: usize,
    pub h: usize,
    pub w_ii: Vec<f64>,
    pub w_if: Vec<f64>,
    pub w_ig: Vec<f64>,
    pub w_io: Vec<f64>,
    pub w_hi: Vec<f64>,
    pub w_hf: Vec<f64>,
    pub w_hg: Vec<f64>,
    pub w_ho: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_f: Vec<f64>,
    pub b_g: Vec<f64>,
    pub b_o: Vec<f64>,
}

pub const LSTM_PARAM_NAMES: [&str; 12] = [
    "w_ii", "w_if", "w_ig", "w_io", "w_hi", "w_hf", "w_hg", "w_ho", "b_i", "b_f", "b_g", "b_o",
];

/// Mutable access to the idx-th parameter buffer, in `LSTM_PARAM_NAMES`
/// order. Used to drive finite differences over each tensor in turn.
pub fn lstm_param_mut(p: &mut RefLstm, idx: usize) -> &mut Vec<f64> {
    match idx {
        0 => &mut p.w_ii,
        1 => &mut p.w_if,
        2 => &mut p.w_ig,
        3 => &mut p.w_io,
        4 => &mut p.w_hi,
        5 => &mut p.w_hf,
        6 => &mut p.w_hg,
        7 => &mut p.w_ho,
        8 => &mut p.b_i,
        9 => &mut p.b_f,
        10 => &mut p.b_g,
        11 => &mut p.b_o,
        _ => panic!("lstm parameter index out of range"),
    }
}

/// f64 reference LSTM: xs is steps x n x d flattened, initial state is
/// zero, returns the final hidden state (n x h). Gate math follows
/// `layers::lstm_cell`; products go through the table in a fixed order.
pub fn ref_lstm_sequence(
    table: &mut FrozenTable,
    p: &RefLstm,
    xs: &[f64],
    steps: usize,
    n: usize,
) -> Vec<f64> {
    let (d, hs) = (p.d, p.h);
    let mut h = vec![0.0f64; n * hs];
    let mut c = vec![0.0f64; n * hs];
    let gate = |table: &mut FrozenTable,
                    w_x: &[f64],
                    w_h: &[f64],
                    bias: &[f64],
                    x: &[f64],
                    h: &[f64]|
     -> Vec<f64> {
        let mut z = vec![0.0f64; n * hs];
        for b in 0..n {
            for u in 0..hs {
                let zx = table.product(&w_x[u * d..(u + 1) * d], &x[b * d..(b + 1) * d]);
                let zh = table.product(&w_h[u * hs..(u + 1) * hs], &h[b * hs..(b + 1) * hs]);
                z[b * hs + u] = zx + zh + bias[u];
            }
        }
        z
    };
    for t in 0..steps {
        let x = &xs[t * n * d..(t + 1) * n * d];
        let zi = gate(table, &p.w_ii, &p.w_hi, &p.b_i, x, &h);
        let zf = gate(table, &p.w_if, &p.w_hf, &p.b_f, x, &h);
        let zg = gate(table, &p.w_ig, &p.w_hg, &p.b_g, x, &h);
        let zo = gate(table, &p.w_io, &p.w_ho, &p.b_o, x, &h);
        for j in 0..n * hs {
            let i = sigmoid64(zi[j]);
            let f = sigmoid64(zf[j]);
            let g = libm::tanh(zg[j]);
            let o = sigmoid64(zo[j]);
            c[j] = f * c[j] + i * g;
            h[j] = o * libm::tanh(c[j]);
        }
    }
    h
}

/// One row of the gradient-check report: a named case, the parameter
/// checked, the worst relative error seen, and the tolerance it was held to.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub case: String,
    pub parameter: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs())).max(1e-8)
}

/// Deliberate corruption hooks proving the suite can fail. `FlipPrGradWSign`
/// negates the tape's PR weight gradient before comparison, which must turn
/// the PR pair rows red.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultInjection {
    None,
    FlipPrGradWSign,
}

const PAIR_TOL_CLOSED_FORM: f64 = 1e-5;
const PAIR_TOL_ORACLE: f64 = 1e-4;
const LAYER_TOL: f64 = 1e-2;
const PAIRS_PER_CASE: usize = 24;
const LAYER_FD_EPS: f64 = 1e-4;

struct CaseAcc {
    max_rel: f64,
}

impl CaseAcc {
    fn new() -> Self {
        CaseAcc { max_rel: 0.0 }
    }

    fn feed(&mut self, got: &[f32], want: &[f64]) {
        for (g, w) in got.iter().zip(want) {
            let e = rel_err(*g as f64, *w);
            if e > self.max_rel {
                self.max_rel = e;
            }
        }
    }

    fn report(self, case: &str, parameter: &str, tol: f64) -> GradCheckReport {
        GradCheckReport {
            case: String::from(case),
            parameter: String::from(parameter),
            max_rel_err: self.max_rel,
            tolerance: tol,
            pass: self.max_rel <= tol,
        }
    }
}

/// Runs pair-level checks (tape vs closed form, tape vs oracle finite
/// differences) for every mode and dimension, then layer-level checks
/// (linear, conv, LSTM) against the frozen-table references.
pub fn gradcheck_suite(
    seed: u64,
    sizes: &[usize],
    modes: &[ProductMode],
) -> Vec<GradCheckReport> {
    gradcheck_suite_with(seed, sizes, modes, FaultInjection::None)
}

pub fn gradcheck_suite_with(
    seed: u64,
    sizes: &[usize],
    modes: &[ProductMode],
    fault: FaultInjection,
) -> Vec<GradCheckReport> {
    let mut reports = Vec::new();
    let mut rng = rng::seeded(seed);
    reports.extend(primitive_cases(&mut rng));
    for &mode in modes {
        for &d in sizes {
            reports.extend(pair_case(&mut rng, mode, d, fault));
        }
        reports.extend(linear_case(&mut rng, mode));
        reports.extend(conv_case(&mut rng, mode));
        reports.extend(lstm_case(&mut rng, mode));
    }
    reports
}

/// Draws a pair that all oracles accept (non-degenerate, and off the R sign
/// boundary when applicable).
fn draw_pair(
    rng: &mut rand_chacha::ChaCha8Rng,
    mode: ProductMode,
    d: usize,
) -> (Vec<f32>, Vec<f32>) {
    for _ in 0..1000 {
        let mut w = vec![0.0f32; d];
        let mut x = vec![0.0f32; d];
        rng::fill_uniform_fan_in(rng, &mut w, d);
        rng::fill_uniform_fan_in(rng, &mut x, d);
        let w64: Vec<f64> = w.iter().map(|&v| v as f64).collect();
        let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        if oracle_grad(mode, &w64, &x64, Wrt::W, ORACLE_EPS).is_ok() {
            return (w, x);
        }
    }
    panic!("could not draw a non-degenerate pair in 1000 attempts");
}

fn pair_case(
    rng: &mut rand_chacha::ChaCha8Rng,
    mode: ProductMode,
    d: usize,
    fault: FaultInjection,
) -> Vec<GradCheckReport> {
    let mut closed_w = CaseAcc::new();
    let mut closed_x = CaseAcc::new();
    let mut oracle_w = CaseAcc::new();
    let mut oracle_x = CaseAcc::new();

    for _ in 0..PAIRS_PER_CASE {
        let (w, x) = draw_pair(rng, mode, d);
        let mut tape = Tape::new();
        let wv = tape.leaf(vec![d], w.clone(), true).unwrap();
        let xv = tape.leaf(vec![d], x.clone(), true).unwrap();
        let y = tape.product_dot(wv, xv, mode).unwrap();
        let mut grads = tape.backward(y).unwrap();
        let mut gw = grads.take(wv).unwrap();
        let gx = grads.take(xv).unwrap();
        if fault == FaultInjection::FlipPrGradWSign && mode == ProductMode::PR {
            gw.iter_mut().for_each(|v| *v = -*v);
        }

        let w64: Vec<f64> = w.iter().map(|&v| v as f64).collect();
        let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let (cw, cx) = crate::product::closed_form_grads(&w, &x, mode).unwrap();
        closed_w.feed(&gw, &cw);
        closed_x.feed(&gx, &cx);

        let ow = oracle_grad(mode, &w64, &x64, Wrt::W, ORACLE_EPS).unwrap();
        let ox = oracle_grad(mode, &w64, &x64, Wrt::X, ORACLE_EPS).unwrap();
        oracle_w.feed(&gw, &ow);
        oracle_x.feed(&gx, &ox);
    }

    let closed = format!("pair-closed-form/{}/d{}", mode.as_str(), d);
    let oracle = format!("pair-oracle-fd/{}/d{}", mode.as_str(), d);
    vec![
        closed_w.report(&closed, "w", PAIR_TOL_CLOSED_FORM),
        closed_x.report(&closed, "x", PAIR_TOL_CLOSED_FORM),
        oracle_w.report(&oracle, "w", PAIR_TOL_ORACLE),
        oracle_x.report(&oracle, "x", PAIR_TOL_ORACLE),
    ]
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Max rel err between a tape gradient and finite differences of `eval`
/// over one f64 buffer, replaying the frozen table for every probe. The
/// closure receives the live (perturbed) buffer.
fn fd_against(
    table: &mut FrozenTable,
    buffer: &mut [f64],
    tape_grad: &[f32],
    mut eval: impl FnMut(&mut FrozenTable, &[f64]) -> f64,
) -> CaseAcc {
    let mut acc = CaseAcc::new();
    for i in 0..buffer.len() {
        let keep = buffer[i];
        buffer[i] = keep + LAYER_FD_EPS;
        table.rewind();
        let fp = eval(table, buffer);
        buffer[i] = keep - LAYER_FD_EPS;
        table.rewind();
        let fm = eval(table, buffer);
        buffer[i] = keep;
        let fd = (fp - fm) / (2.0 * LAYER_FD_EPS);
        acc.feed(&[tape_grad[i]], &[fd]);
    }
    acc
}

fn weighted_sum(out: &[f64], weights: &[f32]) -> f64 {
    out.iter().zip(weights).map(|(o, &v)| o * v as f64).sum()
}

fn linear_case(rng: &mut rand_chacha::ChaCha8Rng, mode: ProductMode) -> Vec<GradCheckReport> {
    let (n, d, m) = (3, 8, 5);
    let mut w = vec![0.0f32; m * d];
    let mut b = vec![0.0f32; m];
    let mut x = vec![0.0f32; n * d];
    let mut v = vec![0.0f32; n * m];
    rng::fill_uniform_fan_in(rng, &mut w, d);
    rng::fill_uniform_fan_in(rng, &mut b, d);
    rng::fill_uniform_fan_in(rng, &mut x, d);
    rng::fill_uniform_fan_in(rng, &mut v, 1);

    let mut tape = Tape::new();
    let wv = tape.leaf(vec![m, d], w.clone(), true).unwrap();
    let bv = tape.leaf(vec![m], b.clone(), true).unwrap();
    let xv = tape.leaf(vec![n, d], x.clone(), true).unwrap();
    let out = layers::linear(&mut tape, xv, wv, Some(bv), mode).unwrap();
    let vv = tape.constant(vec![n, m], v.clone()).unwrap();
    let weighted = tape.mul(out, vv).unwrap();
    let loss = tape.sum_all(weighted).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let gw = grads.take(wv).unwrap();
    let gb = grads.take(bv).unwrap();
    let gx = grads.take(xv).unwrap();

    let (mut w64, mut b64, mut x64) = (to64(&w), to64(&b), to64(&x));
    let mut table = FrozenTable::new(mode);
    {
        let out = ref_linear(&mut table, &x64, n, d, &w64, m, Some(&b64));
        let _ = weighted_sum(&out, &v);
    }
    table.replay();

    let case = format!("layer-linear/{}", mode.as_str());
    let mut reports = Vec::new();
    let acc = fd_against(&mut table, &mut w64, &gw, |t, wp| {
        let out = ref_linear(t, &x64, n, d, wp, m, Some(&b64));
        weighted_sum(&out, &v)
    });
    reports.push(acc.report(&case, "w", LAYER_TOL));
    let acc = fd_against(&mut table, &mut b64, &gb, |t, bp| {
        let out = ref_linear(t, &x64, n, d, &w64, m, Some(bp));
        weighted_sum(&out, &v)
    });
    reports.push(acc.report(&case, "b", LAYER_TOL));
    let acc = fd_against(&mut table, &mut x64, &gx, |t, xp| {
        let out = ref_linear(t, xp, n, d, &w64, m, Some(&b64));
        weighted_sum(&out, &v)
    });
    reports.push(acc.report(&case, "x", LAYER_TOL));
    reports
}

fn conv_case(rng: &mut rand_chacha::ChaCha8Rng, mode: ProductMode) -> Vec<GradCheckReport> {
    let (batch, c, h, w_dim, co, k) = (2, 1, 4, 4, 2, 3);
    let geom = ConvGeom {
        in_c: c,
        in_h: h,
        in_w: w_dim,
        k1: k,
        k2: k,
        stride: 1,
        padding: 1,
    };
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let ck = geom.cols();
    let mut kernel = vec![0.0f32; co * ck];
    let mut bias = vec![0.0f32; co];
    let mut x = vec![0.0f32; batch * c * h * w_dim];
    let mut v = vec![0.0f32; batch * co * oh * ow];
    rng::fill_uniform_fan_in(rng, &mut kernel, ck);
    rng::fill_uniform_fan_in(rng, &mut bias, ck);
    rng::fill_uniform_fan_in(rng, &mut x, 4);
    rng::fill_uniform_fan_in(rng, &mut v, 1);

    let mut tape = Tape::new();
    let kv = tape.leaf(vec![co, c, k, k], kernel.clone(), true).unwrap();
    let bv = tape.leaf(vec![co], bias.clone(), true).unwrap();
    let xv = tape.leaf(vec![batch, c, h, w_dim], x.clone(), true).unwrap();
    let out = layers::conv2d(&mut tape, xv, kv, Some(bv), 1, 1, mode).unwrap();
    let vv = tape.constant(vec![batch, co, oh, ow], v.clone()).unwrap();
    let weighted = tape.mul(out, vv).unwrap();
    let loss = tape.sum_all(weighted).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let gk = grads.take(kv).unwrap();
    let gb = grads.take(bv).unwrap();
    let gx = grads.take(xv).unwrap();

    let (mut k64, mut b64, mut x64) = (to64(&kernel), to64(&bias), to64(&x));
    let mut table = FrozenTable::new(mode);
    {
        let out = ref_conv2d(&mut table, &x64, batch, &geom, &k64, co, Some(&b64));
        let _ = weighted_sum(&out, &v);
    }
    table.replay();

    let case = format!("layer-conv/{}", mode.as_str());
    let mut reports = Vec::new();
    let acc = fd_against(&mut table, &mut k64, &gk, |t, kp| {
        let out = ref_conv2d(t, &x64, batch, &geom, kp, co, Some(&b64));
        weighted_sum(&out, &v)
    });
    reports.push(acc.report(&case, "kernel", LAYER_TOL));
    let acc = fd_against(&mut table, &mut b64, &gb, |t, bp| {
        let out = ref_conv2d(t, &x64, batch, &geom, &k64, co, Some(bp));
        weighted_sum(&out, &v)
    });
    reports.push(acc.report(&case, "b", LAYER_TOL));
    let acc = fd_against(&mut table, &mut x64, &gx, |t, xp| {
        let out = ref_conv2d(t, xp, batch, &geom, &k64, co, Some(&b64));
        weighted_sum(&out, &v)
    });
    reports.push(acc.report(&case, "x", LAYER_TOL));
    reports
}

fn lstm_case(rng: &mut rand_chacha::ChaCha8Rng, mode: ProductMode) -> Vec<GradCheckReport> {
    let (d, hs, n, steps) = (4usize, 4usize, 2usize, 3usize);
    let mk = |rng: &mut rand_chacha::ChaCha8Rng, len: usize, fan: usize| -> Vec<f32> {
        let mut v = vec![0.0f32; len];
        rng::fill_uniform_fan_in(rng, &mut v, fan);
        v
    };
    let params32: Vec<Vec<f32>> = (0..12)
        .map(|i| match i {
            0..=3 => mk(rng, hs * d, d),
            4..=7 => mk(rng, hs * hs, hs),
            _ => mk(rng, hs, hs),
        })
        .collect();
    let xs32: Vec<f32> = mk(rng, steps * n * d, d);
    let v = mk(rng, n * hs, 1);

    let mut tape = Tape::new();
    let shapes: [(usize, usize); 12] = [
        (hs, d),
        (hs, d),
        (hs, d),
        (hs, d),
        (hs, hs),
        (hs, hs),
        (hs, hs),
        (hs, hs),
        (hs, 0),
        (hs, 0),
        (hs, 0),
        (hs, 0),
    ];
    let vars: Vec<Var> = params32
        .iter()
        .zip(shapes.iter())
        .map(|(p, &(r, c))| {
            let shape = if c == 0 { vec![r] } else { vec![r, c] };
            tape.leaf(shape, p.clone(), true).unwrap()
        })
        .collect();
    let p = layers::LstmVars {
        w_ii: vars[0],
        w_if: vars[1],
        w_ig: vars[2],
        w_io: vars[3],
        w_hi: vars[4],
        w_hf: vars[5],
        w_hg: vars[6],
        w_ho: vars[7],
        b_i: vars[8],
        b_f: vars[9],
        b_g: vars[10],
        b_o: vars[11],
    };
    let x_vars: Vec<Var> = (0..steps)
        .map(|t| {
            tape.leaf(
                vec![n, d],
                xs32[t * n * d..(t + 1) * n * d].to_vec(),
                true,
            )
            .unwrap()
        })
        .collect();
    let h0 = tape.leaf(vec![n, hs], vec![0.0; n * hs], false).unwrap();
    let c0 = tape.leaf(vec![n, hs], vec![0.0; n * hs], false).unwrap();
    let states = layers::lstm_sequence(&mut tape, &x_vars, h0, c0, &p, mode).unwrap();
    let h_final = states.last().unwrap().0;
    let vv = tape.constant(vec![n, hs], v.clone()).unwrap();
    let weighted = tape.mul(h_final, vv).unwrap();
    let loss = tape.sum_all(weighted).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let param_grads: Vec<Vec<f32>> = vars.iter().map(|&pv| grads.take(pv).unwrap()).collect();
    let x_grads: Vec<Vec<f32>> = x_vars.iter().map(|&xv| grads.take(xv).unwrap()).collect();

    let mut ref_p = RefLstm {
        d,
        h: hs,
        w_ii: to64(&params32[0]),
        w_if: to64(&params32[1]),
        w_ig: to64(&params32[2]),
        w_io: to64(&params32[3]),
        w_hi: to64(&params32[4]),
        w_hf: to64(&params32[5]),
        w_hg: to64(&params32[6]),
        w_ho: to64(&params32[7]),
        b_i: to64(&params32[8]),
        b_f: to64(&params32[9]),
        b_g: to64(&params32[10]),
        b_o: to64(&params32[11]),
    };
    let mut xs64 = to64(&xs32);
    let mut table = FrozenTable::new(mode);
    {
        let h = ref_lstm_sequence(&mut table, &ref_p, &xs64, steps, n);
        let _ = weighted_sum(&h, &v);
    }
    table.replay();

    let case = format!("layer-lstm/{}", mode.as_str());
    let mut reports = Vec::new();
    for idx in 0..12 {
        let grad = param_grads[idx].clone();
        let mut acc = CaseAcc::new();
        for (i, &g) in grad.iter().enumerate() {
            let keep = lstm_param_mut(&mut ref_p, idx)[i];
            lstm_param_mut(&mut ref_p, idx)[i] = keep + LAYER_FD_EPS;
            table.rewind();
            let fp = {
                let h = ref_lstm_sequence(&mut table, &ref_p, &xs64, steps, n);
                weighted_sum(&h, &v)
            };
            lstm_param_mut(&mut ref_p, idx)[i] = keep - LAYER_FD_EPS;
            table.rewind();
            let fm = {
                let h = ref_lstm_sequence(&mut table, &ref_p, &xs64, steps, n);
                weighted_sum(&h, &v)
            };
            lstm_param_mut(&mut ref_p, idx)[i] = keep;
            acc.feed(&[g], &[(fp - fm) / (2.0 * LAYER_FD_EPS)]);
        }
        reports.push(acc.report(&case, LSTM_PARAM_NAMES[idx], LAYER_TOL));
    }
    // Input gradients, all steps under one report row.
    let mut acc = CaseAcc::new();
    for (t, grad) in x_grads.iter().enumerate() {
        for (i, &g) in grad.iter().enumerate() {
            let flat = t * n * d + i;
            let keep = xs64[flat];
            xs64[flat] = keep + LAYER_FD_EPS;
            table.rewind();
            let fp = {
                let h = ref_lstm_sequence(&mut table, &ref_p, &xs64, steps, n);
                weighted_sum(&h, &v)
            };
            xs64[flat] = keep - LAYER_FD_EPS;
            table.rewind();
            let fm = {
                let h = ref_lstm_sequence(&mut table, &ref_p, &xs64, steps, n);
                weighted_sum(&h, &v)
            };
            xs64[flat] = keep;
            acc.feed(&[g], &[(fp - fm) / (2.0 * LAYER_FD_EPS)]);
        }
    }
    reports.push(acc.report(&case, "x", LAYER_TOL));
    reports
}

const PRIM_TOL: f64 = 1e-2;
const PRIM_EPS: f32 = 1e-3;

/// Finite differences of one tape primitive in 32-bit arithmetic: the
/// builder is replayed on perturbed copies of each input. Inputs are chosen
/// away from kinks (relu at 0, clamp bounds) by the callers.
fn check_primitive(
    name: &str,
    inputs: &[(Vec<usize>, Vec<f32>)],
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> Vec<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, d)| tape.leaf(s.clone(), d.clone(), true).unwrap())
        .collect();
    let loss = build(&mut tape, &vars);
    let mut grads = tape.backward(loss).unwrap();
    let tape_grads: Vec<Vec<f32>> = inputs
        .iter()
        .zip(&vars)
        .map(|((_, d), &v)| grads.take(v).unwrap_or_else(|| vec![0.0; d.len()]))
        .collect();

    let mut probe: Vec<(Vec<usize>, Vec<f32>)> = inputs.to_vec();
    let eval = |probe: &[(Vec<usize>, Vec<f32>)]| -> f64 {
        let mut t = Tape::new();
        let vs: Vec<Var> = probe
            .iter()
            .map(|(s, d)| t.leaf(s.clone(), d.clone(), false).unwrap())
            .collect();
        let l = build(&mut t, &vs);
        t.value(l)[0] as f64
    };

    let mut reports = Vec::new();
    for (i, g) in tape_grads.iter().enumerate() {
        // 32-bit differencing cannot resolve entries far below the gradient's
        // own scale, so errors are measured against the per-input max-abs
        // rather than entrywise. The f64 pair and layer oracles stay strict.
        let mut fd = vec![0.0f64; g.len()];
        for (j, slot) in fd.iter_mut().enumerate() {
            let keep = probe[i].1[j];
            probe[i].1[j] = keep + PRIM_EPS;
            let fp = eval(&probe);
            probe[i].1[j] = keep - PRIM_EPS;
            let fm = eval(&probe);
            probe[i].1[j] = keep;
            *slot = (fp - fm) / (2.0 * PRIM_EPS as f64);
        }
        let scale = g
            .iter()
            .map(|v| v.abs() as f64)
            .chain(fd.iter().map(|v| v.abs()))
            .fold(1e-6f64, f64::max);
        let max_rel = g
            .iter()
            .zip(&fd)
            .map(|(a, b)| (*a as f64 - b).abs() / scale)
            .fold(0.0f64, f64::max);
        reports.push(GradCheckReport {
            case: format!("primitive/{name}"),
            parameter: format!("in{i}"),
            max_rel_err: max_rel,
            tolerance: PRIM_TOL,
            pass: max_rel <= PRIM_TOL,
        });
    }
    reports
}

/// One finite-difference case per tape primitive. The product ops are
/// exercised by the pair and layer cases; detach gets an analytic check
/// because differencing its executed forward would deliberately disagree.
fn primitive_cases(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<GradCheckReport> {
    let mut draw = |len: usize| -> Vec<f32> {
        let mut v = vec![0.0f32; len];
        rng::fill_uniform_fan_in(rng, &mut v, 1);
        v
    };
    let mut reports = Vec::new();
    fn weigh(t: &mut Tape, out: Var, v: &[f32]) -> Var {
        let shape = t.shape(out).to_vec();
        let vv = t.constant(shape, v.to_vec()).unwrap();
        let prod = t.mul(out, vv).unwrap();
        t.sum_all(prod).unwrap()
    }

    {
        let (a, b, v) = (draw(6), draw(6), draw(6));
        for (kind, op) in [
            ("add", 0usize),
            ("subtract", 1),
            ("elementwise-multiply", 2),
        ] {
            let v = v.clone();
            reports.extend(check_primitive(
                kind,
                &[(vec![2, 3], a.clone()), (vec![2, 3], b.clone())],
                &move |t, vars| {
                    let out = match op {
                        0 => t.add(vars[0], vars[1]).unwrap(),
                        1 => t.sub(vars[0], vars[1]).unwrap(),
                        _ => t.mul(vars[0], vars[1]).unwrap(),
                    };
                    weigh(t, out, &v)
                },
            ));
        }
    }
    {
        let (x, v) = (draw(8), draw(8));
        reports.extend(check_primitive(
            "scalar-multiply",
            &[(vec![2, 4], x)],
            &move |t, vars| {
                let out = t.scalar_mul(vars[0], 1.7).unwrap();
                weigh(t, out, &v)
            },
        ));
    }
    {
        let (a, b, v) = (draw(12), draw(8), draw(6));
        reports.extend(check_primitive(
            "matmul",
            &[(vec![3, 4], a), (vec![4, 2], b)],
            &move |t, vars| {
                let out = t.matmul(vars[0], vars[1]).unwrap();
                weigh(t, out, &v)
            },
        ));
    }
    {
        let (x, v) = (draw(12), draw(12));
        reports.extend(check_primitive("transpose", &[(vec![3, 4], x)], &move |t, vars| {
            let out = t.transpose(vars[0]).unwrap();
            weigh(t, out, &v)
        }));
    }
    {
        let (x, v) = (draw(12), draw(3));
        reports.extend(check_primitive("sum-axis", &[(vec![3, 4], x)], &move |t, vars| {
            let out = t.sum_axis(vars[0], 1).unwrap();
            weigh(t, out, &v)
        }));
    }
    {
        let (x, v) = (draw(12), draw(4));
        reports.extend(check_primitive("mean-axis", &[(vec![3, 4], x)], &move |t, vars| {
            let out = t.mean_axis(vars[0], 0).unwrap();
            weigh(t, out, &v)
        }));
    }
    {
        let x = draw(12);
        reports.extend(check_primitive("sum-all", &[(vec![3, 4], x)], &|t, vars| {
            t.sum_all(vars[0]).unwrap()
        }));
    }
    for kind in ["sigmoid", "tanh"] {
        let (x, v) = (draw(10), draw(10));
        reports.extend(check_primitive(kind, &[(vec![2, 5], x)], &move |t, vars| {
            let out = if kind == "sigmoid" {
                t.sigmoid(vars[0]).unwrap()
            } else {
                t.tanh(vars[0]).unwrap()
            };
            weigh(t, out, &v)
        }));
    }
    {
        // Away from the kink at zero.
        let x = vec![-0.9, -0.5, -0.3, 0.2, 0.4, 0.7, 1.1, -1.2, 0.6, -0.8];
        let v = draw(10);
        reports.extend(check_primitive("relu", &[(vec![2, 5], x)], &move |t, vars| {
            let out = t.relu(vars[0]).unwrap();
            weigh(t, out, &v)
        }));
    }
    {
        // Every value at least 0.1 away from the clamp bounds of +/- 0.5.
        let x = vec![-0.9, -0.3, 0.0, 0.2, 0.4, 0.9, -0.7, 0.1, -0.2, 0.7];
        let v = draw(10);
        reports.extend(check_primitive("clamp", &[(vec![2, 5], x)], &move |t, vars| {
            let out = t.clamp(vars[0], -0.5, 0.5).unwrap();
            weigh(t, out, &v)
        }));
    }
    {
        let (x, v) = (draw(12), draw(12));
        reports.extend(check_primitive("softmax", &[(vec![3, 4], x)], &move |t, vars| {
            let out = t.softmax(vars[0]).unwrap();
            weigh(t, out, &v)
        }));
    }
    {
        // Bump one entry per row so no row norm sits near zero.
        let mut x = draw(15);
        for row in 0..3 {
            x[row * 5] += 1.0;
        }
        let v = draw(3);
        reports.extend(check_primitive("row-norm", &[(vec![3, 5], x)], &move |t, vars| {
            let out = t.row_norm(vars[0]).unwrap();
            weigh(t, out, &v)
        }));
    }
    {
        let (a, b, v) = (draw(4), draw(6), draw(10));
        reports.extend(check_primitive(
            "concat",
            &[(vec![2, 2], a), (vec![2, 3], b)],
            &move |t, vars| {
                let out = t.concat(vars[0], vars[1], 1).unwrap();
                weigh(t, out, &v)
            },
        ));
    }
    {
        let (x, v) = (draw(10), draw(6));
        reports.extend(check_primitive("slice", &[(vec![2, 5], x)], &move |t, vars| {
            let out = t.slice(vars[0], 1, 1, 3).unwrap();
            weigh(t, out, &v)
        }));
    }
    {
        let x = draw(12);
        reports.extend(check_primitive(
            "cross-entropy-with-softmax",
            &[(vec![3, 4], x)],
            &|t, vars| t.cross_entropy_logits(vars[0], &[0, 2, 3]).unwrap(),
        ));
    }
    {
        let (x, b, v) = (draw(12), draw(4), draw(12));
        reports.extend(check_primitive(
            "add-bias",
            &[(vec![3, 4], x), (vec![4], b)],
            &move |t, vars| {
                let out = t.add_bias(vars[0], vars[1]).unwrap();
                weigh(t, out, &v)
            },
        ));
    }
    {
        let (x, v) = (draw(18), draw(32));
        let geom = ConvGeom {
            in_c: 2,
            in_h: 3,
            in_w: 3,
            k1: 2,
            k2: 2,
            stride: 1,
            padding: 0,
        };
        reports.extend(check_primitive(
            "im2col",
            &[(vec![1, 2, 3, 3], x)],
            &move |t, vars| {
                let out = t.im2col(vars[0], geom).unwrap();
                weigh(t, out, &v)
            },
        ));
    }
    {
        let (x, v) = (draw(12), draw(12));
        reports.extend(check_primitive(
            "cols-to-image",
            &[(vec![4, 3], x)],
            &move |t, vars| {
                let out = t.cols_to_image(vars[0], 1, 2, 2).unwrap();
                weigh(t, out, &v)
            },
        ));
    }
    {
        let (x, v) = (draw(12), draw(12));
        reports.extend(check_primitive("reshape", &[(vec![2, 6], x)], &move |t, vars| {
            let out = t.reshape(vars[0], vec![3, 4]).unwrap();
            weigh(t, out, &v)
        }));
    }
    reports.push(detach_case(&draw(6)));
    reports
}

/// Analytic detach check: d(sum(detach(x) * x))/dx must equal the detached
/// values exactly, where naive differencing of the executed forward would
/// give 2x.
fn detach_case(x: &[f32]) -> GradCheckReport {
    let mut tape = Tape::new();
    let xv = tape.leaf(vec![x.len()], x.to_vec(), true).unwrap();
    let d = tape.detach(xv).unwrap();
    let prod = tape.mul(d, xv).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let g = grads.take(xv).unwrap();
    let mut acc = CaseAcc::new();
    let want: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    acc.feed(&g, &want);
    acc.report("primitive/detach", "in0", 1e-7)
}

/// CSV with a header and one row per (case, parameter).
pub fn reports_to_csv(reports: &[GradCheckReport]) -> String {
    let mut out = String::from("case,parameter,max_rel_err,tolerance,pass\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.6e},{:.1e},{}\n",
            r.case, r.parameter, r.max_rel_err, r.tolerance, r.pass
        ));
    }
    out
}

pub fn all_pass(reports: &[GradCheckReport]) -> bool {
    reports.iter().all(|r| r.pass)
}
