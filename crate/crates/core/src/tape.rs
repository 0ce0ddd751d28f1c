//! Define-by-run reverse-mode tape.
//!
//! The tape owns every node's value in one arena; user code holds `Var`
//! handles. A forward pass records nodes in topological order, `backward`
//! replays them once in reverse with additive gradient accumulation, and
//! the tape is rebuilt every step (`reset`), which keeps detach and control
//! flow trivially correct.
//!
//! Gradient buffers are dropped as soon as their node has been
//! backpropagated; only leaf gradients survive into the returned map.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::math::{self, EPS_NORM};
use crate::product::{self, ProductMode};
use crate::tensor::{numel, Tensor};

pub type NodeId = usize;

/// Handle to a tape node. Cheap to copy; valid until the tape is reset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub NodeId);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Detach,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    ScalarMul { x: NodeId, c: f32 },
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Transpose { x: NodeId, m: usize, n: usize },
    SumAxis { x: NodeId, axis: usize },
    MeanAxis { x: NodeId, axis: usize },
    SumAll { x: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Relu { x: NodeId },
    Softmax { x: NodeId },
    RowNorm { x: NodeId },
    Clamp { x: NodeId, lo: f32, hi: f32 },
    Concat { a: NodeId, b: NodeId, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize, len: usize },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    AddBias { x: NodeId, b: NodeId },
    Im2col { x: NodeId, batch: usize, geom: ConvGeom },
    ColsToImage { x: NodeId, batch: usize, ch: usize, oh: usize, ow: usize },
    Reshape { x: NodeId },
    ProductDot { w: NodeId, x: NodeId, mode: ProductMode },
    BatchedProduct {
        w: NodeId,
        x: NodeId,
        mode: ProductMode,
        m: usize,
        n: usize,
        d: usize,
        /// Raw inner products, saved only for mode R whose node value is
        /// not the dot matrix the backward needs.
        dots: Option<Vec<f32>>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f32>,
    needs_grad: bool,
}

/// Leaf gradients produced by one backward pass, keyed by node id.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<NodeId, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.map.get(&v.0).map(|g| g.as_slice())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.map.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Zeroes every held gradient buffer in place. Idempotent.
    pub fn zero(&mut self) {
        for g in self.map.values_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    /// Drops all nodes and re-arms backward; existing `Var`s become stale.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    /// Zeroes the listed gradient buffers and clears the tape for the next
    /// step. Calling it twice in a row is a no-op the second time.
    pub fn zero_grad(&mut self, grads: &mut Gradients) {
        grads.zero();
        self.reset();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f32>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Registers a leaf from raw parts.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid("leaf data length does not match shape"));
        }
        Ok(self.push(Op::Leaf, shape, data, requires_grad))
    }

    /// Copies a tensor onto the tape and remembers the node on the tensor,
    /// so its gradient can be fetched after backward.
    pub fn watch(&mut self, t: &mut Tensor, requires_grad: bool) -> Var {
        let v = self
            .leaf(t.shape().to_vec(), t.data().to_vec(), requires_grad)
            .expect("tensor invariants guarantee matching length");
        t.node = Some(v.0);
        v
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    fn binary_same_shape(&mut self, op_name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: op_name,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let value: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a.0) || self.needs(b.0);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, shape, value, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("subtract", a, b)?;
        let value: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a.0) || self.needs(b.0);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Sub { a: a.0, b: b.0 }, shape, value, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("elementwise-multiply", a, b)?;
        let value: Vec<f32> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a.0) || self.needs(b.0);
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, shape, value, needs))
    }

    pub fn scalar_mul(&mut self, x: Var, c: f32) -> Result<Var> {
        let value: Vec<f32> = self.nodes[x.0].value.iter().map(|v| v * c).collect();
        let needs = self.needs(x.0);
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::ScalarMul { x: x.0, c }, shape, value, needs))
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[v.0].shape.clone(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut value = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            1.0,
            &self.nodes[a.0].value,
            false,
            &self.nodes[b.0].value,
            false,
            0.0,
            &mut value,
        );
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(
            Op::Matmul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            vec![m, n],
            value,
            needs,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rank2("transpose", x)?;
        let value = kernels::transpose(&self.nodes[x.0].value, m, n);
        let needs = self.needs(x.0);
        Ok(self.push(Op::Transpose { x: x.0, m, n }, vec![n, m], value, needs))
    }

    fn axis_split(&self, op: &'static str, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = &self.nodes[x.0].shape;
        if axis >= shape.len() {
            return Err(Error::invalid(alloc::format!(
                "{op}: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        Ok((outer, mid, inner))
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let (outer, mid, inner) = self.axis_split("sum/mean", x, axis)?;
        let src = &self.nodes[x.0].value;
        let mut value = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    value[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let scale = 1.0 / mid as f32;
            value.iter_mut().for_each(|v| *v *= scale);
        }
        let mut shape = self.nodes[x.0].shape.clone();
        shape.remove(axis);
        let needs = self.needs(x.0);
        let op = if mean {
            Op::MeanAxis { x: x.0, axis }
        } else {
            Op::SumAxis { x: x.0, axis }
        };
        Ok(self.push(op, shape, value, needs))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.nodes[x.0].value.iter().map(|&v| v as f64).sum();
        let needs = self.needs(x.0);
        Ok(self.push(Op::SumAll { x: x.0 }, Vec::new(), vec![total as f32], needs))
    }

    fn unary_map(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Var {
        let value: Vec<f32> = self.nodes[x.0].value.iter().map(|&v| f(v)).collect();
        let needs = self.needs(x.0);
        let shape = self.nodes[x.0].shape.clone();
        self.push(op, shape, value, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary_map(x, Op::Sigmoid { x: x.0 }, math::sigmoid32))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary_map(x, Op::Tanh { x: x.0 }, math::tanh32))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        Ok(self.unary_map(x, Op::Relu { x: x.0 }, |v| v.max(0.0)))
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::invalid("clamp: lo must be <= hi"));
        }
        Ok(self.unary_map(x, Op::Clamp { x: x.0, lo, hi }, |v| v.clamp(lo, hi)))
    }

    /// Softmax over the last axis, numerically stable.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.is_empty() {
            return Err(Error::invalid("softmax requires rank >= 1"));
        }
        let cols = *shape.last().unwrap();
        let rows = numel(&shape) / cols;
        let value = kernels::softmax_rows(&self.nodes[x.0].value, rows, cols);
        let needs = self.needs(x.0);
        Ok(self.push(Op::Softmax { x: x.0 }, shape, value, needs))
    }

    /// L2 norm of each row of an n x d matrix; output shape [n]. Norms are
    /// accumulated in f64.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.rank2("row-norm", x)?;
        let norms = math::row_norms64(&self.nodes[x.0].value, n, d);
        let value: Vec<f32> = norms.iter().map(|&v| v as f32).collect();
        let needs = self.needs(x.0);
        Ok(self.push(Op::RowNorm { x: x.0 }, vec![n], value, needs))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa
                .iter()
                .zip(sb.iter())
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: sa,
                rhs: sb,
            });
        }
        let (outer, mid_a, inner) = self.axis_split("concat", a, axis)?;
        let mid_b = sb[axis];
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let mut value = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            value.extend_from_slice(&va[o * mid_a * inner..(o + 1) * mid_a * inner]);
            value.extend_from_slice(&vb[o * mid_b * inner..(o + 1) * mid_b * inner]);
        }
        let mut shape = sa.clone();
        shape[axis] = mid_a + mid_b;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(
            Op::Concat {
                a: a.0,
                b: b.0,
                axis,
            },
            shape,
            value,
            needs,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (outer, mid, inner) = self.axis_split("slice", x, axis)?;
        if start + len > mid || len == 0 {
            return Err(Error::invalid(alloc::format!(
                "slice [{start}, {}) out of range for axis length {mid}",
                start + len
            )));
        }
        let src = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = self.nodes[x.0].shape.clone();
        shape[axis] = len;
        let needs = self.needs(x.0);
        Ok(self.push(
            Op::Slice {
                x: x.0,
                axis,
                start,
                len,
            },
            shape,
            value,
            needs,
        ))
    }

    /// Mean over rows of (logsumexp(row) - row[label]): softmax
    /// cross-entropy directly from logits. The softmax is recomputed from
    /// the stored logits during backward, so nothing extra is saved.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.rank2("cross-entropy-with-softmax", logits)?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross-entropy-with-softmax",
                lhs: vec![n, k],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(alloc::format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let z = &self.nodes[logits.0].value;
        let lse = kernels::logsumexp_rows(z, n, k);
        let mut loss = 0.0f64;
        for (i, &label) in labels.iter().enumerate() {
            loss += (lse[i] - z[i * k + label]) as f64;
        }
        loss /= n as f64;
        let needs = self.needs(logits.0);
        Ok(self.push(
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            Vec::new(),
            vec![loss as f32],
            needs,
        ))
    }

    /// Adds a length-m bias vector to every row of an n x m matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.rank2("add-bias", x)?;
        let bs = self.nodes[b.0].shape.clone();
        if bs != [m] {
            return Err(Error::ShapeMismatch {
                op: "add-bias",
                lhs: vec![n, m],
                rhs: bs,
            });
        }
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = Vec::with_capacity(n * m);
        for row in 0..n {
            for col in 0..m {
                value.push(xv[row * m + col] + bv[col]);
            }
        }
        let needs = self.needs(x.0) || self.needs(b.0);
        Ok(self.push(Op::AddBias { x: x.0, b: b.0 }, vec![n, m], value, needs))
    }

    /// Lowers a batch of images to convolution rows; see `kernels::im2col`
    /// for the layout contract.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let [batch, c, h, w] = shape[..] else {
            return Err(Error::ShapeMismatch {
                op: "im2col",
                lhs: shape,
                rhs: vec![0, 0, 0, 0],
            });
        };
        if c != geom.in_c || h != geom.in_h || w != geom.in_w {
            return Err(Error::ShapeMismatch {
                op: "im2col",
                lhs: vec![c, h, w],
                rhs: vec![geom.in_c, geom.in_h, geom.in_w],
            });
        }
        geom.validate()?;
        let value = kernels::im2col(&self.nodes[x.0].value, batch, &geom);
        let rows = batch * geom.out_h() * geom.out_w();
        let needs = self.needs(x.0);
        Ok(self.push(
            Op::Im2col {
                x: x.0,
                batch,
                geom,
            },
            vec![rows, geom.cols()],
            value,
            needs,
        ))
    }

    /// Permutes conv output rows (batch*oh*ow) x ch into batch x ch x oh x ow.
    pub fn cols_to_image(&mut self, x: Var, batch: usize, oh: usize, ow: usize) -> Result<Var> {
        let (rows, ch) = self.rank2("cols-to-image", x)?;
        if rows != batch * oh * ow {
            return Err(Error::ShapeMismatch {
                op: "cols-to-image",
                lhs: vec![rows, ch],
                rhs: vec![batch * oh * ow, ch],
            });
        }
        let src = &self.nodes[x.0].value;
        let mut value = vec![0.0; rows * ch];
        for b in 0..batch {
            for o in 0..ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        value[((b * ch + o) * oh + oy) * ow + ox] =
                            src[((b * oh + oy) * ow + ox) * ch + o];
                    }
                }
            }
        }
        let needs = self.needs(x.0);
        Ok(self.push(
            Op::ColsToImage {
                x: x.0,
                batch,
                ch,
                oh,
                ow,
            },
            vec![batch, ch, oh, ow],
            value,
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.nodes[x.0].value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[x.0].shape.clone(),
                rhs: shape,
            });
        }
        let value = self.nodes[x.0].value.clone();
        let needs = self.needs(x.0);
        Ok(self.push(Op::Reshape { x: x.0 }, shape, value, needs))
    }

    /// Forward identity whose lineage is severed: consumers treat the value
    /// as a constant during backward.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = self.nodes[x.0].value.clone();
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(Op::Detach, shape, value, false))
    }

    /// Single-pair product under `mode`; w and x are rank-1 of equal dim,
    /// output is a scalar. The backward rule is the mode's custom gradient.
    pub fn product_dot(&mut self, w: Var, x: Var, mode: ProductMode) -> Result<Var> {
        let sw = self.nodes[w.0].shape.clone();
        let sx = self.nodes[x.0].shape.clone();
        if sw.len() != 1 || sw != sx {
            return Err(Error::ShapeMismatch {
                op: "product-dot",
                lhs: sw,
                rhs: sx,
            });
        }
        let terms = product::compute_terms(&self.nodes[w.0].value, &self.nodes[x.0].value)?;
        let value = product::product_forward_value(&terms, mode) as f32;
        let needs = self.needs(w.0) || self.needs(x.0);
        Ok(self.push(
            Op::ProductDot {
                w: w.0,
                x: x.0,
                mode,
            },
            Vec::new(),
            vec![value],
            needs,
        ))
    }

    /// Batched product: `w` is m x d (weight vectors as rows), `x` is
    /// n x d (data vectors as rows), result is n x m with entry (b, o) the
    /// mode's product of weight row o and data row b.
    pub fn batched_product(&mut self, w: Var, x: Var, mode: ProductMode) -> Result<Var> {
        let (m, d) = self.rank2("batched-product", w)?;
        let (n, d2) = self.rank2("batched-product", x)?;
        if d != d2 {
            return Err(Error::ShapeMismatch {
                op: "batched-product",
                lhs: vec![m, d],
                rhs: vec![n, d2],
            });
        }
        let (value, dots) = product::batched_forward(
            &self.nodes[w.0].value,
            &self.nodes[x.0].value,
            m,
            n,
            d,
            mode,
        );
        let needs = self.needs(w.0) || self.needs(x.0);
        Ok(self.push(
            Op::BatchedProduct {
                w: w.0,
                x: x.0,
                mode,
                m,
                n,
                d,
                dots,
            },
            vec![n, m],
            value,
            needs,
        ))
    }

    /// Reverse accumulation from a scalar loss. Returns the gradients of
    /// all watched leaves; may be called once per recorded tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::BackwardWithoutReset);
        }
        let root = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::invalid("backward: unknown node"))?;
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = BTreeMap::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                out.insert(id, g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        Ok(Gradients { map: out })
    }

    /// Adds this node's vector-Jacobian product into its inputs' buffers.
    fn backprop_node(&self, id: NodeId, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        // Returns the accumulation buffer for `target`, or None if the
        // subgraph below it is all constants.
        fn buf<'a>(
            nodes: &[Node],
            grads: &'a mut [Option<Vec<f32>>],
            target: NodeId,
        ) -> Option<&'a mut Vec<f32>> {
            if !nodes[target].needs_grad {
                return None;
            }
            let len = nodes[target].value.len();
            Some(grads[target].get_or_insert_with(|| vec![0.0; len]))
        }

        let nodes = &self.nodes;
        match &nodes[id].op {
            Op::Leaf | Op::Detach => {}
            Op::Add { a, b } => {
                for &t in [a, b].iter() {
                    if let Some(dst) = buf(nodes, grads, *t) {
                        dst.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(dst) = buf(nodes, grads, *a) {
                    dst.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
                if let Some(dst) = buf(nodes, grads, *b) {
                    dst.iter_mut().zip(g).for_each(|(d, &gi)| *d -= gi);
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                if let Some(dst) = buf(nodes, grads, *a) {
                    for i in 0..g.len() {
                        dst[i] += g[i] * vb[i];
                    }
                }
                if let Some(dst) = buf(nodes, grads, *b) {
                    for i in 0..g.len() {
                        dst[i] += g[i] * va[i];
                    }
                }
            }
            Op::ScalarMul { x, c } => {
                if let Some(dst) = buf(nodes, grads, *x) {
                    for i in 0..g.len() {
                        dst[i] += g[i] * c;
                    }
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                if let Some(dst) = buf(nodes, grads, *a) {
                    // dA = dC * B^T: (m x n) * (n x k).
                    kernels::gemm(*m, *n, *k, 1.0, g, false, vb, true, 1.0, dst);
                }
                if let Some(dst) = buf(nodes, grads, *b) {
                    // dB = A^T * dC: (k x m) * (m x n).
                    kernels::gemm(*k, *m, *n, 1.0, va, true, g, false, 1.0, dst);
                }
            }
            Op::Transpose { x, m, n } => {
                if let Some(dst) = buf(nodes, grads, *x) {
                    // g has shape n x m; transpose back to m x n.
                    for i in 0..*n {
                        for j in 0..*m {
                            dst[j * *n + i] += g[i * *m + j];
                        }
                    }
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let mean = matches!(nodes[id].op, Op::MeanAxis { .. });
                let shape = &nodes[*x].shape;
                let outer: usize = shape[..*axis].iter().product();
                let mid = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let scale = if mean { 1.0 / mid as f32 } else { 1.0 };
                if let Some(dst) = buf(nodes, grads, *x) {
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            for i in 0..inner {
                                dst[base + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(dst) = buf(nodes, grads, *x) {
                    let gi = g[0];
                    dst.iter_mut().for_each(|d| *d += gi);
                }
            }
            Op::Sigmoid { x } => {
                let y = &nodes[id].value;
                if let Some(dst) = buf(nodes, grads, *x) {
                    for i in 0..g.len() {
                        dst[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Tanh { x } => {
                let y = &nodes[id].value;
                if let Some(dst) = buf(nodes, grads, *x) {
                    for i in 0..g.len() {
                        dst[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Relu { x } => {
                let v = &nodes[*x].value;
                if let Some(dst) = buf(nodes, grads, *x) {
                    for i in 0..g.len() {
                        if v[i] > 0.0 {
                            dst[i] += g[i];
                        }
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let v = &nodes[*x].value;
                if let Some(dst) = buf(nodes, grads, *x) {
                    for i in 0..g.len() {
                        if v[i] > *lo && v[i] < *hi {
                            dst[i] += g[i];
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let y = &nodes[id].value;
                let shape = &nodes[id].shape;
                let cols = *shape.last().unwrap();
                let rows = y.len() / cols;
                if let Some(dst) = buf(nodes, grads, *x) {
                    for r in 0..rows {
                        let (ys, gs) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let mut dot = 0.0f64;
                        for i in 0..cols {
                            dot += (gs[i] * ys[i]) as f64;
                        }
                        let dot = dot as f32;
                        let d = &mut dst[r * cols..(r + 1) * cols];
                        for i in 0..cols {
                            d[i] += ys[i] * (gs[i] - dot);
                        }
                    }
                }
            }
            Op::RowNorm { x } => {
                let v = &nodes[*x].value;
                let y = &nodes[id].value;
                let n = y.len();
                let d = v.len() / n;
                if let Some(dst) = buf(nodes, grads, *x) {
                    for r in 0..n {
                        let inv = (g[r] as f64) / (y[r] as f64).max(EPS_NORM);
                        for i in 0..d {
                            dst[r * d + i] += (inv * v[r * d + i] as f64) as f32;
                        }
                    }
                }
            }
            Op::Concat { a, b, axis } => {
                let sa = &nodes[*a].shape;
                let outer: usize = sa[..*axis].iter().product();
                let mid_a = sa[*axis];
                let inner: usize = sa[*axis + 1..].iter().product();
                let mid_b = nodes[*b].shape[*axis];
                let row = (mid_a + mid_b) * inner;
                if let Some(dst) = buf(nodes, grads, *a) {
                    for o in 0..outer {
                        for i in 0..mid_a * inner {
                            dst[o * mid_a * inner + i] += g[o * row + i];
                        }
                    }
                }
                if let Some(dst) = buf(nodes, grads, *b) {
                    for o in 0..outer {
                        for i in 0..mid_b * inner {
                            dst[o * mid_b * inner + i] += g[o * row + mid_a * inner + i];
                        }
                    }
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let shape = &nodes[*x].shape;
                let outer: usize = shape[..*axis].iter().product();
                let mid = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                if let Some(dst) = buf(nodes, grads, *x) {
                    for o in 0..outer {
                        let base = (o * mid + start) * inner;
                        for i in 0..len * inner {
                            dst[base + i] += g[o * len * inner + i];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let z = &nodes[*logits].value;
                let n = labels.len();
                let k = z.len() / n;
                let probs = kernels::softmax_rows(z, n, k);
                let scale = g[0] / n as f32;
                if let Some(dst) = buf(nodes, grads, *logits) {
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let indicator = if j == label { 1.0 } else { 0.0 };
                            dst[i * k + j] += scale * (probs[i * k + j] - indicator);
                        }
                    }
                }
            }
            Op::AddBias { x, b } => {
                let m = nodes[*b].value.len();
                if let Some(dst) = buf(nodes, grads, *x) {
                    dst.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
                if let Some(dst) = buf(nodes, grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        dst[i % m] += gi;
                    }
                }
            }
            Op::Im2col { x, batch, geom } => {
                if let Some(dst) = buf(nodes, grads, *x) {
                    kernels::col2im(g, *batch, geom, dst);
                }
            }
            Op::ColsToImage {
                x,
                batch,
                ch,
                oh,
                ow,
            } => {
                if let Some(dst) = buf(nodes, grads, *x) {
                    for b in 0..*batch {
                        for o in 0..*ch {
                            for oy in 0..*oh {
                                for ox in 0..*ow {
                                    dst[((b * oh + oy) * ow + ox) * ch + o] +=
                                        g[((b * ch + o) * oh + oy) * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(dst) = buf(nodes, grads, *x) {
                    dst.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                }
            }
            Op::ProductDot { w, x, mode } => {
                let (wv, xv) = (&nodes[*w].value, &nodes[*x].value);
                let terms = product::compute_terms(wv, xv)
                    .expect("shapes were validated when the node was recorded");
                let (gw, gx) = product::product_backward(&terms, wv, xv, *mode, g[0] as f64);
                if let Some(dst) = buf(nodes, grads, *w) {
                    dst.iter_mut().zip(&gw).for_each(|(d, &v)| *d += v);
                }
                if let Some(dst) = buf(nodes, grads, *x) {
                    dst.iter_mut().zip(&gx).for_each(|(d, &v)| *d += v);
                }
            }
            Op::BatchedProduct {
                w,
                x,
                mode,
                m,
                n,
                d,
                dots,
            } => {
                let (wv, xv) = (&nodes[*w].value, &nodes[*x].value);
                let dots = dots.as_deref().unwrap_or(&nodes[id].value);
                let (dw, dx) = product::batched_backward(
                    wv,
                    xv,
                    *m,
                    *n,
                    *d,
                    *mode,
                    dots,
                    g,
                    nodes[*w].needs_grad,
                    nodes[*x].needs_grad,
                );
                if let (Some(dw), Some(dst)) = (dw, buf(nodes, grads, *w)) {
                    dst.iter_mut().zip(&dw).for_each(|(dl, &v)| *dl += v);
                }
                if let (Some(dx), Some(dst)) = (dx, buf(nodes, grads, *x)) {
                    dst.iter_mut().zip(&dx).for_each(|(dl, &v)| *dl += v);
                }
            }
        }
    }
}

/// String-keyed dispatcher over the primitive forward kinds. Parameterized
/// kinds take their parameters as trailing scalar tensors: `scalar-multiply`
/// (x, c), `sum`/`mean` (x[, axis]), `clamp` (x, lo, hi), `concat`
/// (a, b, axis), `slice` (x, axis, start, len),
/// `cross-entropy-with-softmax` (logits, labels). Bare `sum`/`mean` reduce
/// over all elements.
pub fn primitive_forward(kind: &str, inputs: &[Tensor]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let arity = |n: usize| -> Result<()> {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(Error::invalid(alloc::format!(
                "kind `{kind}` expects {n} inputs, got {}",
                inputs.len()
            )))
        }
    };
    let as_index = |i: usize| -> Result<usize> {
        let t = &inputs[i];
        if t.numel() != 1 {
            return Err(Error::invalid(alloc::format!(
                "kind `{kind}`: input {i} must be a scalar parameter"
            )));
        }
        Ok(t.data()[0] as usize)
    };
    let lift = |tape: &mut Tape, i: usize| -> Result<Var> {
        tape.leaf(inputs[i].shape().to_vec(), inputs[i].data().to_vec(), false)
    };

    let out = match kind {
        "add" | "subtract" | "elementwise-multiply" | "matmul" => {
            arity(2)?;
            let a = lift(&mut tape, 0)?;
            let b = lift(&mut tape, 1)?;
            match kind {
                "add" => tape.add(a, b)?,
                "subtract" => tape.sub(a, b)?,
                "elementwise-multiply" => tape.mul(a, b)?,
                _ => tape.matmul(a, b)?,
            }
        }
        "transpose" | "sigmoid" | "tanh" | "relu" | "softmax" | "row-norm" | "detach" => {
            arity(1)?;
            let x = lift(&mut tape, 0)?;
            match kind {
                "transpose" => tape.transpose(x)?,
                "sigmoid" => tape.sigmoid(x)?,
                "tanh" => tape.tanh(x)?,
                "relu" => tape.relu(x)?,
                "softmax" => tape.softmax(x)?,
                "row-norm" => tape.row_norm(x)?,
                _ => tape.detach(x)?,
            }
        }
        "scalar-multiply" => {
            arity(2)?;
            let x = lift(&mut tape, 0)?;
            let c = inputs[1].data().first().copied().ok_or_else(|| {
                Error::invalid("scalar-multiply: second input must be a scalar")
            })?;
            tape.scalar_mul(x, c)?
        }
        "sum" | "mean" => {
            if inputs.len() == 1 {
                let x = lift(&mut tape, 0)?;
                let s = tape.sum_all(x)?;
                if kind == "mean" {
                    tape.scalar_mul(s, 1.0 / inputs[0].numel() as f32)?
                } else {
                    s
                }
            } else {
                arity(2)?;
                let x = lift(&mut tape, 0)?;
                let axis = as_index(1)?;
                if kind == "sum" {
                    tape.sum_axis(x, axis)?
                } else {
                    tape.mean_axis(x, axis)?
                }
            }
        }
        "clamp" => {
            arity(3)?;
            let x = lift(&mut tape, 0)?;
            tape.clamp(x, inputs[1].data()[0], inputs[2].data()[0])?
        }
        "concat" => {
            arity(3)?;
            let a = lift(&mut tape, 0)?;
            let b = lift(&mut tape, 1)?;
            tape.concat(a, b, as_index(2)?)?
        }
        "slice" => {
            arity(4)?;
            let x = lift(&mut tape, 0)?;
            tape.slice(x, as_index(1)?, as_index(2)?, as_index(3)?)?
        }
        "cross-entropy-with-softmax" => {
            arity(2)?;
            let logits = lift(&mut tape, 0)?;
            let labels: Vec<usize> = inputs[1].data().iter().map(|&v| v as usize).collect();
            tape.cross_entropy_logits(logits, &labels)?
        }
        other => return Err(Error::UnknownPrimitive(other.to_string())),
    };

    Tensor::new(tape.shape(out).to_vec(), tape.value(out).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f32>) -> Var {
        tape.leaf(shape, data, true).unwrap()
    }

    #[test]
    fn primitive_forward_spec_values() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let sum = primitive_forward("add", &[a, b]).unwrap();
        assert_eq!(sum.data(), &[4.0, 6.0]);

        let ones23 = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        let ones31 = Tensor::new(vec![3, 1], vec![1.0; 3]).unwrap();
        let mm = primitive_forward("matmul", &[ones23, ones31]).unwrap();
        assert_eq!(mm.shape(), &[2, 1]);
        assert_eq!(mm.data(), &[3.0, 3.0]);

        let zero = Tensor::new(vec![1], vec![0.0]).unwrap();
        let sig = primitive_forward("sigmoid", &[zero]).unwrap();
        assert_eq!(sig.data(), &[0.5]);
    }

    #[test]
    fn primitive_forward_rejects_unknown_kind_and_bad_shapes() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = primitive_forward("frobnicate", core::slice::from_ref(&t)).unwrap_err();
        assert!(matches!(err, Error::UnknownPrimitive(_)));

        let t3 = Tensor::new(vec![3], vec![1.0; 3]).unwrap();
        let err = primitive_forward("add", &[t, t3]).unwrap_err();
        match err {
            Error::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![1.0, -2.0, 0.5]);
        let loss = tape.sum_all(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_product_pair() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![2.0]);
        let y = leaf(&mut tape, vec![1], vec![5.0]);
        let xy = tape.mul(x, y).unwrap();
        let loss = tape.sum_all(xy).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[5.0]);
        assert_eq!(grads.get(y).unwrap(), &[2.0]);
    }

    #[test]
    fn detach_is_identity_forward_and_constant_backward() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![1.5]);
        let d = tape.detach(x).unwrap();
        assert_eq!(tape.value(d), &[1.5]);

        // d(detach(x) * x)/dx = detach(x) = 3, not 2x = 6.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![3.0]);
        let d = tape.detach(x).unwrap();
        let prod = tape.mul(d, x).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0]);

        // d(detach(x))/dx = 0: no gradient reaches the leaf.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![3.0]);
        let d = tape.detach(x).unwrap();
        let loss = tape.sum_all(d).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn backward_requires_scalar_loss_and_single_use() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarLoss(_))
        ));

        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(
            tape.backward(loss),
            Err(Error::BackwardWithoutReset)
        ));
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn zero_grad_clears_buffers_and_rearms_backward() {
        let data = vec![1.0, 2.0, 3.0];
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], data.clone());
        let loss = tape.sum_all(x).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        let first = grads.get(x).unwrap().to_vec();
        assert_eq!(first, vec![1.0, 1.0, 1.0]);

        tape.zero_grad(&mut grads);
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 0.0]);
        tape.zero_grad(&mut grads);
        assert_eq!(grads.get(x).unwrap(), &[0.0, 0.0, 0.0]);
        assert!(tape.is_empty());

        // Rebuild after zero_grad: fresh gradients equal a single-pass run.
        let x = leaf(&mut tape, vec![3], data);
        let loss = tape.sum_all(x).unwrap();
        let again = tape.backward(loss).unwrap();
        assert_eq!(again.get(x).unwrap(), first.as_slice());
    }

    #[test]
    fn fan_out_accumulates_additively() {
        // loss = sum(x) + sum(x): grad should be 2 everywhere.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let s1 = tape.sum_all(x).unwrap();
        let s2 = tape.sum_all(x).unwrap();
        let loss = tape.add(s1, s2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn branch_permutation_changes_nothing_materially() {
        let run = |swap: bool| -> Vec<f32> {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, vec![3], vec![0.3, -0.8, 1.2]);
            let a = tape.sigmoid(x).unwrap();
            let b = tape.tanh(x).unwrap();
            let sum = if swap {
                tape.add(b, a).unwrap()
            } else {
                tape.add(a, b).unwrap()
            };
            let loss = tape.sum_all(sum).unwrap();
            tape.backward(loss).unwrap().take(x).unwrap()
        };
        let g0 = run(false);
        let g1 = run(true);
        for (a, b) in g0.iter().zip(g1.iter()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn constants_are_skipped_entirely() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let c = tape.constant(vec![2], vec![10.0, 20.0]).unwrap();
        let prod = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[10.0, 20.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn matmul_backward_matches_hand_computation() {
        // loss = sum(A*B), dA = rowsum-of-B broadcast, dB likewise.
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[19.0, 22.0, 43.0, 50.0]);
        let loss = tape.sum_all(c).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(a).unwrap(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.take(b).unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, vec![1, 2], vec![0.0, 0.0]);
        let loss = tape.cross_entropy_logits(z, &[1]).unwrap();
        let v = tape.value(loss)[0];
        assert!((v - core::f32::consts::LN_2).abs() < 1e-6);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(z).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-6);
        assert!((g[1] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn add_bias_accumulates_column_sums() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![3], vec![1.0, 2.0, 3.0]);
        let y = tape.add_bias(x, b).unwrap();
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let loss = tape.sum_all(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_and_slice_round_trip_gradients() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, vec![2, 1], vec![9.0, 8.0]);
        let cat = tape.concat(a, b, 1).unwrap();
        assert_eq!(tape.value(cat), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let back = tape.slice(cat, 1, 2, 1).unwrap();
        assert_eq!(tape.value(back), &[9.0, 8.0]);
        let loss = tape.sum_all(back).unwrap();
        let grads = tape.backward(loss).unwrap();
        // The slice keeps only b's columns, so a is reached through concat
        // but every sensitivity routed to it is zero.
        assert_eq!(grads.get(a).unwrap(), &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(grads.get(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn batched_product_identity_example() {
        let mut tape = Tape::new();
        let w = leaf(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let x = leaf(&mut tape, vec![1, 2], vec![3.0, 4.0]);
        let y = tape.batched_product(w, x, ProductMode::P).unwrap();
        assert_eq!(tape.value(y), &[3.0, 4.0]);
    }

    #[test]
    fn batched_product_pr_forward_equals_p_forward() {
        let mut rng = crate::rng::seeded(42);
        let mut wv = vec![0.0f32; 64 * 128];
        let mut xv = vec![0.0f32; 32 * 128];
        crate::rng::fill_uniform_fan_in(&mut rng, &mut wv, 128);
        crate::rng::fill_uniform_fan_in(&mut rng, &mut xv, 128);
        let mut tape = Tape::new();
        let w = leaf(&mut tape, vec![64, 128], wv);
        let x = leaf(&mut tape, vec![32, 128], xv);
        let yp = tape.batched_product(w, x, ProductMode::P).unwrap();
        let ypr = tape.batched_product(w, x, ProductMode::PR).unwrap();
        let (vp, vpr) = (tape.value(yp), tape.value(ypr));
        let max_diff = vp
            .iter()
            .zip(vpr)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff <= 1e-5, "max diff {max_diff}");
    }

    #[test]
    fn reshape_and_sum_axis_shapes() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = tape.reshape(x, vec![3, 2]).unwrap();
        assert_eq!(tape.shape(r), &[3, 2]);
        let s0 = tape.sum_axis(x, 0).unwrap();
        assert_eq!(tape.shape(s0), &[3]);
        assert_eq!(tape.value(s0), &[5.0, 7.0, 9.0]);
        let m1 = tape.mean_axis(x, 1).unwrap();
        assert_eq!(tape.value(m1), &[2.0, 5.0]);
    }

    #[test]
    fn watch_links_tensor_to_leaf() {
        let mut tape = Tape::new();
        let mut t = Tensor::new(vec![2], vec![1.0, 4.0]).unwrap();
        let v = tape.watch(&mut t, true);
        assert_eq!(t.node, Some(v.0));
        let loss = tape.sum_all(v).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        t.set_grad(grads.take(v).unwrap()).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn zero_grad_then_fresh_backward_matches_single_pass() {
        let run_once = || {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, vec![2], vec![0.4, -0.6]);
            let y = tape.sigmoid(x).unwrap();
            let loss = tape.sum_all(y).unwrap();
            tape.backward(loss).unwrap().take(x).unwrap()
        };
        let first = run_once();

        let mut t = Tensor::new(vec![2], vec![0.4, -0.6]).unwrap();
        let mut tape = Tape::new();
        let v = tape.watch(&mut t, true);
        let y = tape.sigmoid(v).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        t.set_grad(grads.take(v).unwrap()).unwrap();
        // zero_grad clears buffers and the tape is rebuilt for step two.
        t.zero_grad();
        t.zero_grad(); // idempotent
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
        tape.reset();
        let v = tape.watch(&mut t, true);
        let y = tape.sigmoid(v).unwrap();
        let loss = tape.sum_all(y).unwrap();
        let mut grads = tape.backward(loss).unwrap();
        assert_eq!(grads.take(v).unwrap(), first);
    }
}
