//! Scalar math helpers: f64-accumulated reductions over f32 buffers and
//! `no_std` wrappers around libm transcendentals.
//!
//! Storage is 32-bit throughout the crate; dot products and norms are
//! accumulated in 64-bit so that gradient checks stay tight.

use alloc::vec::Vec;

/// Lower bound applied to any L2 norm used as a divisor. Prevents NaN at
/// zero vectors without perturbing normal-scale values.
pub const EPS_NORM: f64 = 1e-12;

/// Parallel-degeneracy threshold: when the rejection is shorter than
/// `EPS_PAR * norm(x)` the unit rejection is treated as the zero vector.
pub const EPS_PAR: f64 = 1e-6;

#[inline]
pub fn dot64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (&ai, &bi) in a.iter().zip(b.iter()) {
        acc += ai as f64 * bi as f64;
    }
    acc
}

#[inline]
pub fn norm64(a: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for &ai in a {
        acc += ai as f64 * ai as f64;
    }
    libm::sqrt(acc)
}

/// L2 norm of each row of a row-major `rows x cols` matrix, in f64.
pub fn row_norms64(m: &[f32], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        out.push(norm64(&m[r * cols..(r + 1) * cols]));
    }
    out
}

#[inline]
pub fn sqrt32(x: f32) -> f32 {
    libm::sqrtf(x)
}

#[inline]
pub fn exp32(x: f32) -> f32 {
    libm::expf(x)
}

#[inline]
pub fn ln32(x: f32) -> f32 {
    libm::logf(x)
}

#[inline]
pub fn tanh32(x: f32) -> f32 {
    libm::tanhf(x)
}

#[inline]
pub fn sigmoid32(x: f32) -> f32 {
    1.0 / (1.0 + libm::expf(-x))
}

#[inline]
pub fn cos64(x: f64) -> f64 {
    libm::cos(x)
}

#[inline]
pub fn sin64(x: f64) -> f64 {
    libm::sin(x)
}

#[inline]
pub fn sqrt64(x: f64) -> f64 {
    libm::sqrt(x)
}

/// sign with the fixed convention sign(0) = +1, so downstream formulas stay
/// piecewise constant across the boundary instead of producing 0.
#[inline]
pub fn sign_pos(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// |sin theta| from a cosine that may exceed [-1, 1] by a few ulps; the
/// clamp keeps the square root real.
#[inline]
pub fn abs_sin_from_cos(cos: f64) -> f64 {
    let c = cos.clamp(-1.0, 1.0);
    libm::sqrt((1.0 - c * c).max(0.0))
}
