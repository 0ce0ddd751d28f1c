//! Layer builders over the tape.
//!
//! Every contraction routes through `Tape::batched_product`, so the product
//! mode is a per-call argument rather than a property of the layer. Weight
//! layout is rows-as-vectors: a linear layer's weight is out x in, and each
//! output unit's row meets each input row pairwise.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::ConvGeom;
use crate::product::ProductMode;
use crate::tape::{Tape, Var};

/// x: n x d, w: m x d, b: m. Returns n x m.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>, mode: ProductMode) -> Result<Var> {
    let y = tape.batched_product(w, x, mode)?;
    match b {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

/// x: n x c x h x w, kernel: co x c x k1 x k2, bias: co.
/// Returns n x co x oh x ow. Lowers to im2col rows so each output pixel is
/// the product of a kernel row with its receptive-field vector.
pub fn conv2d(
    tape: &mut Tape,
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    mode: ProductMode,
) -> Result<Var> {
    conv2d_with_cols(tape, x, kernel, bias, stride, padding, mode).map(|(out, _)| out)
}

/// As `conv2d`, additionally returning the im2col rows var: those rows are
/// exactly the data vectors each kernel row meets, which the angle
/// statistics enumerate.
pub fn conv2d_with_cols(
    tape: &mut Tape,
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    mode: ProductMode,
) -> Result<(Var, Var)> {
    let xs = tape.shape(x).to_vec();
    let ks = tape.shape(kernel).to_vec();
    let ([batch, c, h, w], [co, kc, k1, k2]) = (match xs[..] {
        [a, b, cc, d] => [a, b, cc, d],
        _ => {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: vec![0, 0, 0, 0],
            })
        }
    }, match ks[..] {
        [a, b, cc, d] => [a, b, cc, d],
        _ => {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: ks,
                rhs: vec![0, 0, 0, 0],
            })
        }
    });
    if kc != c {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: vec![batch, c, h, w],
            rhs: vec![co, kc, k1, k2],
        });
    }
    let geom = ConvGeom {
        in_c: c,
        in_h: h,
        in_w: w,
        k1,
        k2,
        stride,
        padding,
    };
    geom.validate()?;
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let cols = tape.im2col(x, geom)?;
    let wk = tape.reshape(kernel, vec![co, c * k1 * k2])?;
    let rows = tape.batched_product(wk, cols, mode)?;
    let rows = match bias {
        Some(b) => tape.add_bias(rows, b)?,
        None => rows,
    };
    let out = tape.cols_to_image(rows, batch, oh, ow)?;
    Ok((out, cols))
}

/// Parameter handles for one LSTM layer: four input matrices (H x D), four
/// recurrent matrices (H x H) and four biases (H), in gate order i, f, g, o.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_ii: Var,
    pub w_if: Var,
    pub w_ig: Var,
    pub w_io: Var,
    pub w_hi: Var,
    pub w_hf: Var,
    pub w_hg: Var,
    pub w_ho: Var,
    pub b_i: Var,
    pub b_f: Var,
    pub b_g: Var,
    pub b_o: Var,
}

impl LstmVars {
    pub fn all(&self) -> [Var; 12] {
        [
            self.w_ii, self.w_if, self.w_ig, self.w_io, self.w_hi, self.w_hf, self.w_hg,
            self.w_ho, self.b_i, self.b_f, self.b_g, self.b_o,
        ]
    }
}

/// One step: x is n x D, h and c are n x H. Returns (h', c') where
///   i = sigmoid(x W_ii + h W_hi + b_i)   f = sigmoid(x W_if + h W_hf + b_f)
///   g = tanh   (x W_ig + h W_hg + b_g)   o = sigmoid(x W_io + h W_ho + b_o)
///   c' = f .* c + i .* g                 h' = o .* tanh(c')
pub fn lstm_cell(
    tape: &mut Tape,
    x: Var,
    h: Var,
    c: Var,
    p: &LstmVars,
    mode: ProductMode,
) -> Result<(Var, Var)> {
    let gate = |tape: &mut Tape, w_i: Var, w_h: Var, b: Var| -> Result<Var> {
        let from_x = tape.batched_product(w_i, x, mode)?;
        let from_h = tape.batched_product(w_h, h, mode)?;
        let s = tape.add(from_x, from_h)?;
        tape.add_bias(s, b)
    };
    let zi = gate(tape, p.w_ii, p.w_hi, p.b_i)?;
    let zf = gate(tape, p.w_if, p.w_hf, p.b_f)?;
    let zg = gate(tape, p.w_ig, p.w_hg, p.b_g)?;
    let zo = gate(tape, p.w_io, p.w_ho, p.b_o)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let g = tape.tanh(zg)?;
    let o = tape.sigmoid(zo)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next)?;
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Unrolls `lstm_cell` over the timestep inputs, threading (h, c).
/// Returns the state after each step.
pub fn lstm_sequence(
    tape: &mut Tape,
    xs: &[Var],
    h0: Var,
    c0: Var,
    p: &LstmVars,
    mode: ProductMode,
) -> Result<Vec<(Var, Var)>> {
    let mut states = Vec::with_capacity(xs.len());
    let (mut h, mut c) = (h0, c0);
    for &x in xs {
        let (hn, cn) = lstm_cell(tape, x, h, c, p, mode)?;
        states.push((hn, cn));
        h = hn;
        c = cn;
    }
    Ok(states)
}
