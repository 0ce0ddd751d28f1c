//! Dense compute kernels: a strided sgemm wrapper, im2col/col2im, and
//! small row-wise helpers shared by the tape operations.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// C (m x n, row-major) += alpha * A' * B' with C pre-scaled by beta.
///
/// When `a_t` is false the buffer `a` is row-major m x k; when true it is
/// row-major k x m and its transpose is used. Likewise `b` is k x n or
/// n x k. Transposition is expressed through strides, so no operand is
/// copied.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Out-of-place transpose of a row-major m x n matrix.
pub fn transpose(a: &[f32], m: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Geometry of one conv2d application; shared by im2col, col2im and the
/// layer that wires them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k1: usize,
    pub k2: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding).saturating_sub(self.k1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding).saturating_sub(self.k2) / self.stride + 1
    }

    pub fn cols(&self) -> usize {
        self.in_c * self.k1 * self.k2
    }

    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 || self.stride == 0 {
            return Err(Error::invalid("kernel dims and stride must be positive"));
        }
        if self.in_h + 2 * self.padding < self.k1 || self.in_w + 2 * self.padding < self.k2 {
            return Err(Error::invalid(alloc::format!(
                "non-positive conv output: input {}x{} pad {} kernel {}x{}",
                self.in_h,
                self.in_w,
                self.padding,
                self.k1,
                self.k2
            )));
        }
        Ok(())
    }
}

/// Lowers a batch of images (batch x C x H x W, row-major) to a matrix with
/// one row per output position: rows = batch*out_h*out_w, cols = C*k1*k2.
/// Column order is channel-major then kernel-row then kernel-column, which
/// matches a row-major flattened kernel exactly.
pub fn im2col(x: &[f32], batch: usize, g: &ConvGeom) -> Vec<f32> {
    let (oh, ow, cols) = (g.out_h(), g.out_w(), g.cols());
    let mut out = vec![0.0; batch * oh * ow * cols];
    let plane = g.in_h * g.in_w;
    for b in 0..batch {
        let img = &x[b * g.in_c * plane..(b + 1) * g.in_c * plane];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * cols;
                for ci in 0..g.in_c {
                    for ki in 0..g.k1 {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let src = ci * plane + iy as usize * g.in_w;
                        let dst = row + (ci * g.k1 + ki) * g.k2;
                        for kj in 0..g.k2 {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            out[dst + kj] = img[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of `im2col`: scatter-adds column gradients back onto the image
/// gradient buffer (batch x C x H x W).
pub fn col2im(dcols: &[f32], batch: usize, g: &ConvGeom, dx: &mut [f32]) {
    let (oh, ow, cols) = (g.out_h(), g.out_w(), g.cols());
    debug_assert_eq!(dcols.len(), batch * oh * ow * cols);
    let plane = g.in_h * g.in_w;
    debug_assert_eq!(dx.len(), batch * g.in_c * plane);
    for b in 0..batch {
        let img = &mut dx[b * g.in_c * plane..(b + 1) * g.in_c * plane];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * cols;
                for ci in 0..g.in_c {
                    for ki in 0..g.k1 {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let dst = ci * plane + iy as usize * g.in_w;
                        let src = row + (ci * g.k1 + ki) * g.k2;
                        for kj in 0..g.k2 {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            img[dst + ix as usize] += dcols[src + kj];
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable softmax applied to each row of a rows x cols matrix.
pub fn softmax_rows(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0f64;
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row.iter()) {
            let e = math::exp32(v - max);
            *o = e;
            sum += e as f64;
        }
        let inv = (1.0 / sum) as f32;
        for o in &mut out[r * cols..(r + 1) * cols] {
            *o *= inv;
        }
    }
    out
}

/// log(sum(exp(row))) per row, stable.
pub fn logsumexp_rows(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0f64;
        for &v in row {
            sum += math::exp32(v - max) as f64;
        }
        out.push(max + libm::log(sum) as f32);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn naive_gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_t: bool,
        b: &[f32],
        b_t: bool,
    ) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for l in 0..k {
                    let av = if a_t { a[l * m + i] } else { a[i * k + l] };
                    let bv = if b_t { b[j * k + l] } else { b[l * n + j] };
                    acc += av as f64 * bv as f64;
                }
                c[i * n + j] = acc as f32;
            }
        }
        c
    }

    fn fill(seed: u64, len: usize) -> Vec<f32> {
        let mut rng = crate::rng::seeded(seed);
        let mut v = vec![0.0; len];
        crate::rng::fill_uniform_fan_in(&mut rng, &mut v, 4);
        v
    }

    #[test]
    fn gemm_matches_naive_for_all_transpose_combinations() {
        let (m, k, n) = (5, 7, 4);
        for (a_t, b_t) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = fill(1 + a_t as u64, m * k);
            let b = fill(10 + b_t as u64, k * n);
            let want = naive_gemm(m, k, n, &a, a_t, &b, b_t);
            let mut got = vec![0.0; m * n];
            gemm(m, k, n, 1.0, &a, a_t, &b, b_t, 0.0, &mut got);
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() <= 1e-5 * w.abs().max(1.0), "a_t={a_t} b_t={b_t}");
            }
        }
    }

    #[test]
    fn gemm_applies_alpha_and_beta() {
        let a = [1.0, 2.0, 3.0, 4.0]; // 2x2
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = [10.0, 10.0, 10.0, 10.0];
        gemm(2, 2, 2, 2.0, &a, false, &b, false, 0.5, &mut c);
        assert_eq!(c, [7.0, 9.0, 11.0, 13.0]);
    }

    #[test]
    fn transpose_round_trips() {
        let a = fill(3, 6);
        let t = transpose(&a, 2, 3);
        let back = transpose(&t, 3, 2);
        assert_eq!(a, back);
        assert_eq!(t[0], a[0]);
        assert_eq!(t[1], a[3]);
    }

    #[test]
    fn im2col_single_window_lists_values_in_declared_order() {
        // 1x2x2 input, 2x2 kernel, stride 1, pad 0: one row of 4 values.
        let g = ConvGeom {
            in_c: 1,
            in_h: 2,
            in_w: 2,
            k1: 2,
            k2: 2,
            stride: 1,
            padding: 0,
        };
        let x = [1.0, 2.0, 3.0, 4.0];
        let cols = im2col(&x, 1, &g);
        assert_eq!(cols, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn im2col_padding_zero_fills_the_border() {
        // 1x1x1 input, 3x3 kernel, pad 1: one row, center value surrounded
        // by zeros.
        let g = ConvGeom {
            in_c: 1,
            in_h: 1,
            in_w: 1,
            k1: 3,
            k2: 3,
            stride: 1,
            padding: 1,
        };
        let cols = im2col(&[5.0], 1, &g);
        let mut want = vec![0.0; 9];
        want[4] = 5.0;
        assert_eq!(cols, want);
    }

    #[test]
    fn im2col_rejects_non_positive_output() {
        let g = ConvGeom {
            in_c: 1,
            in_h: 2,
            in_w: 2,
            k1: 3,
            k2: 3,
            stride: 1,
            padding: 0,
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let g = ConvGeom {
            in_c: 2,
            in_h: 5,
            in_w: 4,
            k1: 3,
            k2: 3,
            stride: 2,
            padding: 1,
        };
        let batch = 2;
        let x = fill(7, batch * 2 * 5 * 4);
        let rows = batch * g.out_h() * g.out_w();
        let y = fill(8, rows * g.cols());
        let cols = im2col(&x, batch, &g);
        let lhs = crate::math::dot64(&cols, &y);
        let mut dx = vec![0.0; x.len()];
        col2im(&y, batch, &g, &mut dx);
        let rhs = crate::math::dot64(&x, &dx);
        assert!((lhs - rhs).abs() < 1e-6, "{lhs} vs {rhs}");
    }

    #[test]
    fn softmax_rows_is_stable_and_normalized() {
        let x = [1000.0, 1001.0, -3.0, -3.0];
        let s = softmax_rows(&x, 2, 2);
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s[0] + s[1] - 1.0).abs() < 1e-6);
        assert!((s[2] - 0.5).abs() < 1e-6);
        let lse = logsumexp_rows(&x, 2, 2);
        assert!((lse[0] - (1001.0 + libm::logf(1.0 + libm::expf(-1.0)))).abs() < 1e-3);
    }
}
