//! Property-level checks of the product family: forward identities, the
//! P/R recombination, invariants of the projection/rejection split, and
//! scale covariance of the gradients.

use prgrad_core::product::{
    closed_form_grads, compute_terms, product_forward_value, rotation_derivative_check,
};
use prgrad_core::rng;
use prgrad_core::ProductMode;
use proptest::prelude::*;
use rand::Rng;

fn draw_vec(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> Vec<f32> {
    let mut v = vec![0.0f32; d];
    rng::fill_standard_normal(rng, &mut v);
    v
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| p as f64 * q as f64)
        .sum()
}

fn norm64(a: &[f32]) -> f64 {
    dot64(a, a).sqrt()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Every mode except R must return the exact inner product, bitwise the
/// same f64 as the plain dot, over many pairs and dimensions.
#[test]
fn forward_matches_inner_product_for_non_r_modes() {
    let mut r = rng::seeded(11);
    for &d in &[2usize, 3, 16, 256] {
        for _ in 0..500 {
            let w = draw_vec(&mut r, d);
            let x = draw_vec(&mut r, d);
            let t = compute_terms(&w, &x).unwrap();
            let dot = dot64(&w, &x);
            for mode in [
                ProductMode::P,
                ProductMode::PR,
                ProductMode::PLengthOnly,
                ProductMode::PDirectionOnly,
            ] {
                assert_eq!(product_forward_value(&t, mode), dot);
            }
        }
    }
}

/// R's value against its definition evaluated independently:
/// sign(cos) * |w| * (|x| - |x - p_x|).
#[test]
fn r_forward_matches_direct_evaluation() {
    let mut r = rng::seeded(12);
    for &d in &[2usize, 3, 16] {
        for _ in 0..300 {
            let w = draw_vec(&mut r, d);
            let x = draw_vec(&mut r, d);
            let t = compute_terms(&w, &x).unwrap();

            let nw = norm64(&w);
            let nx = norm64(&x);
            let dot = dot64(&w, &x);
            let cos = dot / (nw * nx);
            let scale = dot / (nw * nw);
            let rx: Vec<f64> = x
                .iter()
                .zip(&w)
                .map(|(&xi, &wi)| xi as f64 - scale * wi as f64)
                .collect();
            let nrx = rx.iter().map(|v| v * v).sum::<f64>().sqrt();
            let sign = if cos < 0.0 { -1.0 } else { 1.0 };
            let want = sign * nw * (nx - nrx);

            // The literal subtraction reference carries absolute rounding
            // noise of order 1e-16 * |w||x|, so the bound is taken against
            // that natural scale rather than the (possibly tiny) value.
            let got = product_forward_value(&t, ProductMode::R);
            assert!(
                (got - want).abs() < 1e-12 * nw * nx,
                "d={d}: {got} vs {want}"
            );
        }
    }
}

/// PR = detach(|sin|) * P + detach(|cos|) * R holds exactly for the value
/// and for both gradients (the detached factors are plain constants).
#[test]
fn recombination_identity_for_value_and_gradients() {
    let mut r = rng::seeded(13);
    for &d in &[2usize, 3, 16, 256] {
        for _ in 0..250 {
            let w = draw_vec(&mut r, d);
            let x = draw_vec(&mut r, d);
            let t = compute_terms(&w, &x).unwrap();
            if t.degenerate {
                continue;
            }
            let s = t.abs_sin_theta;
            let c = t.cos_theta.abs();

            let v_pr = product_forward_value(&t, ProductMode::PR);
            let v_p = product_forward_value(&t, ProductMode::P);
            let v_r = product_forward_value(&t, ProductMode::R);
            assert!(rel(v_pr, s * v_p + c * v_r) < 1e-5);

            let (gw_pr, gx_pr) = closed_form_grads(&w, &x, ProductMode::PR).unwrap();
            let (gw_p, gx_p) = closed_form_grads(&w, &x, ProductMode::P).unwrap();
            let (gw_r, gx_r) = closed_form_grads(&w, &x, ProductMode::R).unwrap();
            for i in 0..d {
                assert!(rel(gw_pr[i], s * gw_p[i] + c * gw_r[i]) < 1e-5);
                assert!(rel(gx_pr[i], s * gx_p[i] + c * gx_r[i]) < 1e-5);
            }
        }
    }
}

/// Rotating w toward x changes the frozen forward at a rate whose
/// magnitude is |w||x| for PR (angle-independent) and |w||x||sin| for P.
#[test]
fn rotation_sensitivity_magnitudes() {
    let mut r = rng::seeded(14);
    for &theta in &[0.1f64, 0.5, 1.0, 2.0, 3.0] {
        for _ in 0..20 {
            // Build a pair with the exact requested angle inside a random
            // plane, then scale both sides arbitrarily.
            let d = 8;
            let a = draw_vec(&mut r, d);
            let b = draw_vec(&mut r, d);
            let na = norm64(&a);
            let u1: Vec<f64> = a.iter().map(|&v| v as f64 / na).collect();
            let proj = dot64(&b, &a) / (na * na);
            let b_perp: Vec<f64> = b
                .iter()
                .zip(&a)
                .map(|(&bi, &ai)| bi as f64 - proj * ai as f64)
                .collect();
            let nb = b_perp.iter().map(|v| v * v).sum::<f64>().sqrt();
            let u2: Vec<f64> = b_perp.iter().map(|v| v / nb).collect();

            let sw: f64 = r.random_range(0.5..2.0);
            let sx: f64 = r.random_range(0.5..2.0);
            let w: Vec<f32> = u1.iter().map(|&v| (sw * v) as f32).collect();
            let x: Vec<f32> = (0..d)
                .map(|i| (sx * (theta.cos() * u1[i] + theta.sin() * u2[i])) as f32)
                .collect();

            let nw = norm64(&w);
            let nx = norm64(&x);
            let dpr = rotation_derivative_check(&w, &x, ProductMode::PR).unwrap();
            let dp = rotation_derivative_check(&w, &x, ProductMode::P).unwrap();
            assert!(
                rel(dpr.abs(), nw * nx) < 1e-3,
                "PR at theta={theta}: {} vs {}",
                dpr.abs(),
                nw * nx
            );
            let t = compute_terms(&w, &x).unwrap();
            assert!(
                rel(dp.abs(), nw * nx * t.abs_sin_theta) < 1e-3,
                "P at theta={theta}: {} vs {}",
                dp.abs(),
                nw * nx * t.abs_sin_theta
            );
        }
    }
}

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(-3.0f32..3.0, d)
}

proptest! {
    /// Projection plus rejection reconstructs x, and the projection length
    /// is |x||cos|.
    #[test]
    fn projection_rejection_split(w in vec_strategy(6), x in vec_strategy(6)) {
        prop_assume!(norm64(&w) > 1e-3 && norm64(&x) > 1e-3);
        let t = compute_terms(&w, &x).unwrap();
        for i in 0..6 {
            let back = t.p_x[i] + t.r_x[i];
            prop_assert!((back - x[i] as f64).abs() < 1e-9 * norm64(&x).max(1.0));
        }
        let np = t.p_x.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((np - t.norm_x * t.cos_theta.abs()).abs() < 1e-9 * t.norm_x);
    }

    /// The unit rejection is either a unit vector or exactly zero
    /// (degenerate pairs).
    #[test]
    fn unit_rejection_is_unit_or_zero(w in vec_strategy(5), x in vec_strategy(5)) {
        prop_assume!(norm64(&w) > 1e-3 && norm64(&x) > 1e-3);
        let t = compute_terms(&w, &x).unwrap();
        let n = t.e_rx.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(n.abs() < 1e-12 || (n - 1.0).abs() < 1e-9);
    }

    /// grad_w scales with the data side and grad_x with the weight side:
    /// f(aw, bx) has grad_w = b * grad_w(w, x) and grad_x = a * grad_x(w, x)
    /// for every mode (angles are scale invariant). The scales are powers
    /// of two so the f32 rescaling is exact and does not perturb the angle.
    #[test]
    fn gradient_scale_covariance(
        w in vec_strategy(4),
        x in vec_strategy(4),
        a_exp in -2i32..3,
        b_exp in -2i32..3,
    ) {
        prop_assume!(norm64(&w) > 1e-2 && norm64(&x) > 1e-2);
        let t = compute_terms(&w, &x).unwrap();
        prop_assume!(!t.degenerate);
        // Keep clear of the degeneracy switch so both evaluations take the
        // same branch.
        prop_assume!(t.abs_sin_theta > 1e-3);
        let a = (2.0f32).powi(a_exp);
        let b = (2.0f32).powi(b_exp);
        let ws: Vec<f32> = w.iter().map(|&v| a * v).collect();
        let xs: Vec<f32> = x.iter().map(|&v| b * v).collect();
        for mode in ProductMode::ALL {
            let (gw, gx) = closed_form_grads(&w, &x, mode).unwrap();
            let (gws, gxs) = closed_form_grads(&ws, &xs, mode).unwrap();
            for i in 0..4 {
                prop_assert!(rel(gws[i], b as f64 * gw[i]) < 1e-5,
                    "{mode:?} gw[{i}]: {} vs {}", gws[i], b as f64 * gw[i]);
                prop_assert!(rel(gxs[i], a as f64 * gx[i]) < 1e-5,
                    "{mode:?} gx[{i}]: {} vs {}", gxs[i], a as f64 * gx[i]);
            }
        }
    }

    /// The part of PR's grad_w orthogonal to w always has length |x|; for
    /// plain P that component is the rejection with length |x||sin|.
    #[test]
    fn pr_grad_w_orthogonal_component_has_full_length(
        w in vec_strategy(5),
        x in vec_strategy(5),
    ) {
        prop_assume!(norm64(&w) > 1e-2 && norm64(&x) > 1e-2);
        let t = compute_terms(&w, &x).unwrap();
        prop_assume!(!t.degenerate && t.abs_sin_theta > 1e-3);

        let orth_len = |g: &[f64]| -> f64 {
            let nw = norm64(&w);
            let along = g
                .iter()
                .zip(&w)
                .map(|(&gi, &wi)| gi * wi as f64)
                .sum::<f64>() / (nw * nw);
            let res: f64 = g
                .iter()
                .zip(&w)
                .map(|(&gi, &wi)| {
                    let r = gi - along * wi as f64;
                    r * r
                })
                .sum();
            res.sqrt()
        };

        let (gw_pr, _) = closed_form_grads(&w, &x, ProductMode::PR).unwrap();
        let (gw_p, _) = closed_form_grads(&w, &x, ProductMode::P).unwrap();
        prop_assert!(rel(orth_len(&gw_pr), t.norm_x) < 1e-6);
        prop_assert!(rel(orth_len(&gw_p), t.norm_x * t.abs_sin_theta) < 1e-6);
    }
}
