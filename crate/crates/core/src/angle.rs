//! Per-layer angle statistics between weight vectors and the data vectors
//! they meet: min |sin theta| (the orthogonality diagnostic) and
//! mean |cos theta|.
//!
//! The fast path computes the cosine matrix with one GEMM plus row norms;
//! `angle_stats_bruteforce` recomputes every pair through `compute_terms`
//! and serves as the oracle.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::math::{self, EPS_NORM};
use crate::product;

/// One layer's pairing: m weight rows against n data rows, both length d.
/// For conv layers the data rows are im2col windows; LSTM layers submit
/// input-to-hidden and hidden-to-hidden parts as separate sets.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub name: String,
    pub w: Vec<f32>,
    pub m: usize,
    pub x: Vec<f32>,
    pub n: usize,
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngleEntry {
    pub layer: String,
    pub min_abs_sin: f64,
    pub mean_abs_cos: f64,
}

fn validate(set: &PairSet) -> Result<()> {
    if set.m == 0 || set.n == 0 || set.d == 0 {
        return Err(Error::invalid(alloc::format!(
            "angle stats over empty pair set `{}`",
            set.name
        )));
    }
    if set.w.len() != set.m * set.d || set.x.len() != set.n * set.d {
        return Err(Error::invalid(alloc::format!(
            "pair set `{}` buffer lengths disagree with (m, n, d)",
            set.name
        )));
    }
    Ok(())
}

/// min |sin| and mean |cos| over all m*n pairs of one set.
fn stats_from_cos(cos_iter: impl Iterator<Item = f64>, count: usize) -> (f64, f64) {
    let mut min_abs_sin = f64::INFINITY;
    let mut sum_abs_cos = 0.0;
    for c in cos_iter {
        let c = c.clamp(-1.0, 1.0);
        let s = math::sqrt64((1.0 - c * c).max(0.0));
        if s < min_abs_sin {
            min_abs_sin = s;
        }
        sum_abs_cos += c.abs();
    }
    (min_abs_sin, sum_abs_cos / count as f64)
}

/// GEMM fast path: one f32 dot-product matrix, f64 norms.
pub fn angle_stats(sets: &[PairSet]) -> Result<Vec<AngleEntry>> {
    let mut out = Vec::with_capacity(sets.len());
    for set in sets {
        validate(set)?;
        let (m, n, d) = (set.m, set.n, set.d);
        let mut dots = vec![0.0f32; n * m];
        kernels::gemm(n, d, m, 1.0, &set.x, false, &set.w, true, 0.0, &mut dots);
        let nw = math::row_norms64(&set.w, m, d);
        let nx = math::row_norms64(&set.x, n, d);
        let cos = (0..n * m).map(|i| {
            let (b, o) = (i / m, i % m);
            dots[i] as f64 / (nw[o] * nx[b]).max(EPS_NORM)
        });
        let (min_abs_sin, mean_abs_cos) = stats_from_cos(cos, n * m);
        out.push(AngleEntry {
            layer: set.name.clone(),
            min_abs_sin,
            mean_abs_cos,
        });
    }
    Ok(out)
}

/// Oracle: the same statistics via per-pair `compute_terms`.
pub fn angle_stats_bruteforce(sets: &[PairSet]) -> Result<Vec<AngleEntry>> {
    let mut out = Vec::with_capacity(sets.len());
    for set in sets {
        validate(set)?;
        let (m, n, d) = (set.m, set.n, set.d);
        let mut min_abs_sin = f64::INFINITY;
        let mut sum_abs_cos = 0.0;
        for b in 0..n {
            for o in 0..m {
                let terms = product::compute_terms(
                    &set.w[o * d..(o + 1) * d],
                    &set.x[b * d..(b + 1) * d],
                )?;
                if terms.abs_sin_theta < min_abs_sin {
                    min_abs_sin = terms.abs_sin_theta;
                }
                sum_abs_cos += terms.cos_theta.abs();
            }
        }
        out.push(AngleEntry {
            layer: set.name.clone(),
            min_abs_sin,
            mean_abs_cos: sum_abs_cos / (n * m) as f64,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    fn set(name: &str, w: Vec<f32>, m: usize, x: Vec<f32>, n: usize, d: usize) -> PairSet {
        PairSet {
            name: name.to_string(),
            w,
            m,
            x,
            n,
            d,
        }
    }

    #[test]
    fn orthogonal_rows_give_min_sin_one() {
        // Weight rows (1,0,0) and (0,1,0) against the single data vector
        // (0,0,2): every pair is orthogonal.
        let s = set(
            "fc",
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            2,
            vec![0.0, 0.0, 2.0],
            1,
            3,
        );
        let stats = angle_stats(&[s]).unwrap();
        assert_eq!(stats[0].min_abs_sin, 1.0);
        assert_eq!(stats[0].mean_abs_cos, 0.0);
    }

    #[test]
    fn parallel_pair_gives_min_sin_zero() {
        let s = set(
            "fc",
            vec![1.0, 0.0, 0.0, 1.0],
            2,
            vec![3.0, 0.0],
            1,
            2,
        );
        let stats = angle_stats(&[s]).unwrap();
        assert!(stats[0].min_abs_sin.abs() < 1e-6);
        assert!((stats[0].mean_abs_cos - 0.5).abs() < 1e-9);
    }

    #[test]
    fn fast_path_matches_bruteforce_oracle() {
        let mut r = crate::rng::seeded(31);
        let (m, n, d) = (16, 32, 24);
        let mut w = vec![0.0f32; m * d];
        let mut x = vec![0.0f32; n * d];
        crate::rng::fill_uniform_fan_in(&mut r, &mut w, d);
        crate::rng::fill_uniform_fan_in(&mut r, &mut x, d);
        let sets = [set("layer", w, m, x, n, d)];
        let fast = angle_stats(&sets).unwrap();
        let brute = angle_stats_bruteforce(&sets).unwrap();
        assert_eq!(fast[0].layer, brute[0].layer);
        assert!(
            (fast[0].min_abs_sin - brute[0].min_abs_sin).abs() < 1e-4,
            "{} vs {}",
            fast[0].min_abs_sin,
            brute[0].min_abs_sin
        );
        assert!((fast[0].mean_abs_cos - brute[0].mean_abs_cos).abs() < 1e-5);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let s = set("empty", vec![], 0, vec![1.0], 1, 1);
        assert!(angle_stats(&[s]).is_err());
        let bad = set("bad", vec![1.0; 3], 2, vec![1.0; 2], 1, 2);
        assert!(angle_stats(&[bad]).is_err());
    }

    #[test]
    fn zero_rows_hit_the_norm_guard() {
        let s = set("zeros", vec![0.0, 0.0], 1, vec![1.0, 1.0], 1, 2);
        let stats = angle_stats(&[s]).unwrap();
        // cos collapses to 0 under the epsilon guard: fully orthogonal.
        assert_eq!(stats[0].min_abs_sin, 1.0);
    }
}
