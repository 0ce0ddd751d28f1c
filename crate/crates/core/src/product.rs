//! The product family: P (standard inner product), R (rejection product),
//! PR (inner-product forward with a rotation-hardened backward), and two
//! gradient-ablated P variants used to probe length vs direction gradients.
//!
//! Geometry, for a weight vector w and data vector x with angle theta:
//! the projection P_x = (cos theta * |x|) * w/|w| is the component of x
//! along w, the rejection R_x = x - P_x is the orthogonal component, and
//! E_rx = R_x/|R_x| is the unit rejection. The standard product's gradient
//! w.r.t. w is x = P_x + |x|*|sin theta|*E_rx. PR keeps the forward value
//! w.x but replaces that gradient with P_x + |x|*E_rx, so the direction
//! component no longer vanishes as the vectors align. R is the
//! rejection-only counterpart with forward sign(cos)*|w|*(|x| - |R_x|).

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::math::{self, EPS_NORM, EPS_PAR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[allow(clippy::upper_case_acronyms)]
pub enum ProductMode {
    /// Standard inner product.
    P,
    /// Rejection product: sign(cos)*|w|*(|x| - |R_x|).
    R,
    /// Inner-product forward, modified backward (grad_w = P_x + |x|*E_rx).
    PR,
    /// P forward, backward w.r.t. w keeps only the length part P_x.
    PLengthOnly,
    /// P forward, backward w.r.t. w keeps only the direction part R_x.
    PDirectionOnly,
}

impl ProductMode {
    pub const ALL: [ProductMode; 5] = [
        ProductMode::P,
        ProductMode::R,
        ProductMode::PR,
        ProductMode::PLengthOnly,
        ProductMode::PDirectionOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProductMode::P => "P",
            ProductMode::R => "R",
            ProductMode::PR => "PR",
            ProductMode::PLengthOnly => "P_LENGTH_ONLY",
            ProductMode::PDirectionOnly => "P_DIRECTION_ONLY",
        }
    }

    /// True for every mode whose forward value is exactly w.x.
    pub fn forward_is_inner_product(&self) -> bool {
        !matches!(self, ProductMode::R)
    }
}

impl core::str::FromStr for ProductMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "P" => Ok(ProductMode::P),
            "R" => Ok(ProductMode::R),
            "PR" => Ok(ProductMode::PR),
            "P_LENGTH_ONLY" => Ok(ProductMode::PLengthOnly),
            "P_DIRECTION_ONLY" => Ok(ProductMode::PDirectionOnly),
            other => Err(Error::invalid(alloc::format!(
                "unknown product mode `{other}` (expected P, R, PR, P_LENGTH_ONLY, P_DIRECTION_ONLY)"
            ))),
        }
    }
}

impl core::fmt::Display for ProductMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Angle decomposition of one (w, x) pair, computed in f64.
#[derive(Debug, Clone)]
pub struct ProductTerms {
    pub dot: f64,
    pub norm_w: f64,
    pub norm_x: f64,
    /// cos theta = w.x / max(|w||x|, eps), clamped to [-1, 1].
    pub cos_theta: f64,
    /// |sin theta| = sqrt(1 - cos^2), so cos^2 + sin^2 == 1 by construction.
    pub abs_sin_theta: f64,
    /// Projection of x onto w.
    pub p_x: Vec<f64>,
    /// Rejection x - p_x.
    pub r_x: Vec<f64>,
    pub norm_rx: f64,
    /// x / |x|, or zero when |x| < EPS_NORM.
    pub e_x: Vec<f64>,
    /// r_x / |r_x|, or zero for degenerate (near-parallel) pairs.
    pub e_rx: Vec<f64>,
    /// |R_x| < EPS_PAR * |x|: the unit rejection is undefined, E_rx := 0.
    pub degenerate: bool,
}

pub fn compute_terms(w: &[f32], x: &[f32]) -> Result<ProductTerms> {
    if w.len() != x.len() || w.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "compute_terms",
            lhs: alloc::vec![w.len()],
            rhs: alloc::vec![x.len()],
        });
    }
    let dot = math::dot64(w, x);
    let norm_w = math::norm64(w);
    let norm_x = math::norm64(x);
    let cos_theta = (dot / (norm_w * norm_x).max(EPS_NORM)).clamp(-1.0, 1.0);
    let abs_sin_theta = math::abs_sin_from_cos(cos_theta);

    let w_scale = cos_theta * norm_x / norm_w.max(EPS_NORM);
    let p_x: Vec<f64> = w.iter().map(|&wi| w_scale * wi as f64).collect();
    let r_x: Vec<f64> = x
        .iter()
        .zip(p_x.iter())
        .map(|(&xi, &pi)| xi as f64 - pi)
        .collect();
    let norm_rx = {
        let mut acc = 0.0;
        for &v in &r_x {
            acc += v * v;
        }
        math::sqrt64(acc)
    };
    let degenerate = norm_rx < EPS_PAR * norm_x;

    let e_x: Vec<f64> = if norm_x < EPS_NORM {
        alloc::vec![0.0; x.len()]
    } else {
        x.iter().map(|&xi| xi as f64 / norm_x).collect()
    };
    let e_rx: Vec<f64> = if degenerate || norm_rx < EPS_NORM {
        alloc::vec![0.0; x.len()]
    } else {
        r_x.iter().map(|&v| v / norm_rx).collect()
    };

    Ok(ProductTerms {
        dot,
        norm_w,
        norm_x,
        cos_theta,
        abs_sin_theta,
        p_x,
        r_x,
        norm_rx,
        e_x,
        e_rx,
        degenerate,
    })
}

/// Forward value of one pair under `mode`. Every mode except R returns the
/// plain inner product; the PR backward modification never touches the
/// forward value.
pub fn product_forward_value(terms: &ProductTerms, mode: ProductMode) -> f64 {
    match mode {
        ProductMode::R => {
            // |w| (|x| - |R_x|) written as dot^2 / (|w| (|x| + |R_x|)): the
            // same value without subtracting nearly equal norms near
            // orthogonality.
            math::sign_pos(terms.cos_theta) * terms.dot * terms.dot
                / (terms.norm_w * (terms.norm_x + terms.norm_rx)).max(EPS_NORM)
        }
        _ => terms.dot,
    }
}

/// Per-pair backward coefficients. Every mode's gradients lie in
/// span{w, x}:
///   grad_w = p*w + q*x,  grad_x = r*w + t*x.
/// This form lets the batched backward run as two matrix products instead
/// of materializing per-pair rejection vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairCoeffs {
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub t: f64,
}

/// Coefficients from the pair's scalar statistics only. `a = w.x/|w|^2` is
/// the projection scale (p_x = a*w), and expanding E_rx = (x - a*w)/(|x|s)
/// in the gradient formulas yields the entries below. In the degenerate
/// branch (|sin| < EPS_PAR) E_rx is the zero vector by convention, which
/// collapses PR's grad_w to P_x and removes the 1/s terms.
pub fn pair_coeffs(mode: ProductMode, dot: f64, norm_w: f64, norm_x: f64) -> PairCoeffs {
    let nw = norm_w.max(EPS_NORM);
    let nx = norm_x.max(EPS_NORM);
    let a = dot / (nw * nw);
    let cos = (dot / (nw * nx)).clamp(-1.0, 1.0);
    let s = math::abs_sin_from_cos(cos);
    let sg = math::sign_pos(cos);
    let degenerate = s < EPS_PAR;

    match mode {
        ProductMode::P => PairCoeffs {
            p: 0.0,
            q: 1.0,
            r: 1.0,
            t: 0.0,
        },
        ProductMode::PLengthOnly => PairCoeffs {
            p: a,
            q: 0.0,
            r: 1.0,
            t: 0.0,
        },
        ProductMode::PDirectionOnly => PairCoeffs {
            p: -a,
            q: 1.0,
            r: 1.0,
            t: 0.0,
        },
        ProductMode::PR => {
            if degenerate {
                // grad_w = P_x; grad_x keeps the |sin|*w + cos*|w|*E_x part.
                PairCoeffs {
                    p: a,
                    q: 0.0,
                    r: s,
                    t: cos * norm_w / nx,
                }
            } else {
                PairCoeffs {
                    p: a * (1.0 - 1.0 / s),
                    q: 1.0 / s,
                    r: s + cos * norm_w * a / (nx * s),
                    t: cos * norm_w / nx * (1.0 - 1.0 / s),
                }
            }
        }
        ProductMode::R => {
            if degenerate {
                PairCoeffs {
                    p: sg * norm_x * (1.0 - s) / nw,
                    q: 0.0,
                    r: 0.0,
                    t: sg * norm_w / nx,
                }
            } else {
                PairCoeffs {
                    p: sg * norm_x * (1.0 - s) / nw - cos.abs() * a / s,
                    q: cos.abs() / s,
                    r: sg * norm_w * a / (nx * s),
                    t: sg * norm_w / nx * (1.0 - 1.0 / s),
                }
            }
        }
    }
}

/// Mode-specific gradients of one pair, scaled by `upstream`. This is the
/// rule the tape installs; it is checked against `closed_form_grads` (the
/// literal vector formulas) and against frozen-coefficient finite
/// differences, which take independent routes.
pub fn product_backward(
    terms: &ProductTerms,
    w: &[f32],
    x: &[f32],
    mode: ProductMode,
    upstream: f64,
) -> (Vec<f32>, Vec<f32>) {
    let c = pair_coeffs(mode, terms.dot, terms.norm_w, terms.norm_x);
    let d = w.len();
    let mut gw = Vec::with_capacity(d);
    let mut gx = Vec::with_capacity(d);
    for i in 0..d {
        let wi = w[i] as f64;
        let xi = x[i] as f64;
        gw.push((upstream * (c.p * wi + c.q * xi)) as f32);
        gx.push((upstream * (c.r * wi + c.t * xi)) as f32);
    }
    (gw, gx)
}

/// Analytic oracle: evaluates the gradient formulas with the projection,
/// rejection, and unit vectors materialized explicitly, entirely outside
/// the tape/coefficient path.
pub fn closed_form_grads(w: &[f32], x: &[f32], mode: ProductMode) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = compute_terms(w, x)?;
    let d = w.len();
    let w64: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let nw = t.norm_w.max(EPS_NORM);
    let sg = math::sign_pos(t.cos_theta);

    let (gw, gx): (Vec<f64>, Vec<f64>) = match mode {
        ProductMode::P => (x64, w64),
        ProductMode::PLengthOnly => (t.p_x.clone(), w64),
        ProductMode::PDirectionOnly => (t.r_x.clone(), w64),
        ProductMode::PR => {
            let gw = (0..d)
                .map(|i| t.p_x[i] + t.norm_x * t.e_rx[i])
                .collect::<Vec<_>>();
            let gx = (0..d)
                .map(|i| {
                    t.abs_sin_theta * w64[i] + t.cos_theta * t.norm_w * (t.e_x[i] - t.e_rx[i])
                })
                .collect::<Vec<_>>();
            (gw, gx)
        }
        ProductMode::R => {
            let gw = (0..d)
                .map(|i| {
                    sg * (t.norm_x - t.norm_rx) * w64[i] / nw
                        + t.cos_theta.abs() * t.norm_x * t.e_rx[i]
                })
                .collect::<Vec<_>>();
            let gx = (0..d)
                .map(|i| sg * t.norm_w * (t.e_x[i] - t.e_rx[i]))
                .collect::<Vec<_>>();
            (gw, gx)
        }
    };
    Ok((gw, gx))
}

/// Batched forward: entry (b, o) of the result is the product of weight
/// row o with data row b. `w` is m x d (one weight vector per row), `x` is
/// n x d, output is n x m. For mode R the inner-product matrix is also
/// returned, because the backward needs the raw dots while the node value
/// holds the R values.
pub fn batched_forward(
    w: &[f32],
    x: &[f32],
    m: usize,
    n: usize,
    d: usize,
    mode: ProductMode,
) -> (Vec<f32>, Option<Vec<f32>>) {
    let mut dots = alloc::vec![0.0f32; n * m];
    kernels::gemm(n, d, m, 1.0, x, false, w, true, 0.0, &mut dots);
    if mode.forward_is_inner_product() {
        return (dots, None);
    }
    let nw = math::row_norms64(w, m, d);
    let nx = math::row_norms64(x, n, d);
    let mut values = alloc::vec![0.0f32; n * m];
    for b in 0..n {
        for o in 0..m {
            let dot = dots[b * m + o] as f64;
            let cos = (dot / (nw[o] * nx[b]).max(EPS_NORM)).clamp(-1.0, 1.0);
            let s = math::abs_sin_from_cos(cos);
            // 1 - s = cos^2 / (1 + s), avoiding cancellation near s = 1.
            values[b * m + o] =
                (math::sign_pos(cos) * nw[o] * nx[b] * cos * cos / (1.0 + s)) as f32;
        }
    }
    (values, Some(dots))
}

/// Batched backward. With per-pair coefficients (p, q, r, t) and upstream
/// U (n x m):
///   grad_W = diag(colsum_b(U.P)) * W + (U.Q)^T * X
///   grad_X = (U.R) * W + diag(rowsum_o(U.T)) * X
/// i.e. two gemms plus elementwise work; `.` is the Hadamard product.
#[allow(clippy::too_many_arguments)]
pub fn batched_backward(
    w: &[f32],
    x: &[f32],
    m: usize,
    n: usize,
    d: usize,
    mode: ProductMode,
    dots: &[f32],
    upstream: &[f32],
    need_dw: bool,
    need_dx: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    if !need_dw && !need_dx {
        return (None, None);
    }
    let nw = math::row_norms64(w, m, d);
    let nx = math::row_norms64(x, n, d);

    let mut uq = if need_dw {
        alloc::vec![0.0f32; n * m]
    } else {
        Vec::new()
    };
    let mut ur = if need_dx {
        alloc::vec![0.0f32; n * m]
    } else {
        Vec::new()
    };
    let mut col_up = alloc::vec![0.0f64; if need_dw { m } else { 0 }];
    let mut row_ut = alloc::vec![0.0f64; if need_dx { n } else { 0 }];

    for b in 0..n {
        for o in 0..m {
            let idx = b * m + o;
            let u = upstream[idx] as f64;
            if u == 0.0 {
                continue;
            }
            let c = pair_coeffs(mode, dots[idx] as f64, nw[o], nx[b]);
            if need_dw {
                uq[idx] = (u * c.q) as f32;
                col_up[o] += u * c.p;
            }
            if need_dx {
                ur[idx] = (u * c.r) as f32;
                row_ut[b] += u * c.t;
            }
        }
    }

    let dw = if need_dw {
        let mut dw = alloc::vec![0.0f32; m * d];
        kernels::gemm(m, n, d, 1.0, &uq, true, x, false, 0.0, &mut dw);
        for o in 0..m {
            let scale = col_up[o] as f32;
            if scale != 0.0 {
                for j in 0..d {
                    dw[o * d + j] += scale * w[o * d + j];
                }
            }
        }
        Some(dw)
    } else {
        None
    };

    let dx = if need_dx {
        let mut dx = alloc::vec![0.0f32; n * d];
        kernels::gemm(n, m, d, 1.0, &ur, false, w, false, 0.0, &mut dx);
        for b in 0..n {
            let scale = row_ut[b] as f32;
            if scale != 0.0 {
                for j in 0..d {
                    dx[b * d + j] += scale * x[b * d + j];
                }
            }
        }
        Some(dx)
    } else {
        None
    };

    (dw, dx)
}

/// Central finite difference of the frozen-coefficient forward under
/// rotating w by +/- delta toward x inside the w-x plane (so d theta /
/// d phi = -1). For PR the magnitude is |w||x| regardless of theta; for P
/// it is |w||x||sin theta|. Near-parallel pairs have no defined rotation
/// plane and return `DegeneratePair`.
pub fn rotation_derivative_check(w: &[f32], x: &[f32], mode: ProductMode) -> Result<f64> {
    let terms = compute_terms(w, x)?;
    if terms.degenerate || terms.norm_w < EPS_NORM || terms.norm_x < EPS_NORM {
        return Err(Error::DegeneratePair);
    }
    let d = w.len();
    let w64: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    // Orthonormal frame of the w-x plane: u1 along w, u2 the unit rejection
    // of x, so rotating from u1 toward u2 moves w toward x.
    let u1: Vec<f64> = w64.iter().map(|&v| v / terms.norm_w).collect();
    let u2: Vec<f64> = terms.e_rx.clone();

    let frozen = crate::verify::Frozen::at(mode, &w64, &x64);
    let eval = |phi: f64| -> f64 {
        let (c, s) = (math::cos64(phi), math::sin64(phi));
        let w_rot: Vec<f64> = (0..d)
            .map(|i| terms.norm_w * (c * u1[i] + s * u2[i]))
            .collect();
        crate::verify::frozen_value(&frozen, &w_rot, &x64)
    };
    let delta = 1e-6;
    Ok((eval(delta) - eval(-delta)) / (2.0 * delta))
}

/// Parses the mode list used by CLI flags and configs.
pub fn parse_modes(csv: &str) -> Result<Vec<ProductMode>> {
    csv.split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<Vec<_>>>()
}

impl ProductMode {
    pub fn to_string_alloc(&self) -> String {
        String::from(self.as_str())
    }
}
