//! Shared helpers for integration tests: random grids and a central
//! finite-difference gradient oracle. The oracle only re-evaluates the
//! function under test; it never reuses analytic gradients.

// Each test binary uses a different subset of these helpers.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatstyle_core::Grid;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_grid(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, lo: f32, hi: f32) -> Grid {
    let data = (0..c * h * w).map(|_| rng.gen_range(lo..hi)).collect();
    Grid::from_vec(c, h, w, data).unwrap()
}

/// Random grid with every value at least `margin` away from zero, for ops
/// with a kink at the origin.
pub fn rand_grid_off_zero(
    rng: &mut ChaCha8Rng,
    c: usize,
    h: usize,
    w: usize,
    margin: f32,
) -> Grid {
    let data = (0..c * h * w)
        .map(|_| {
            let mag = rng.gen_range(margin..1.0f32);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Grid::from_vec(c, h, w, data).unwrap()
}

/// Central finite difference in one coordinate of a flat parameter vector.
pub fn central_diff(f: &mut dyn FnMut(&[f32]) -> f32, x: &[f32], i: usize, h: f32) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let mut xm = x.to_vec();
    xm[i] -= h;
    (f(&xp) as f64 - f(&xm) as f64) / (2.0 * h as f64)
}

/// Compare an analytic gradient against central differences coordinate by
/// coordinate. Fails with the offending coordinate in the message.
pub fn assert_grad_matches(
    name: &str,
    f: &mut dyn FnMut(&[f32]) -> f32,
    x: &[f32],
    analytic: &[f32],
    h: f32,
    rel_tol: f64,
    abs_tol: f64,
) {
    assert_eq!(x.len(), analytic.len(), "{name}: gradient length mismatch");
    for i in 0..x.len() {
        let fd = central_diff(f, x, i, h);
        let a = analytic[i] as f64;
        let err = (a - fd).abs();
        let tol = abs_tol + rel_tol * a.abs().max(fd.abs());
        assert!(
            err <= tol,
            "{name}[{i}]: analytic {a:.6e} vs finite-diff {fd:.6e} (err {err:.3e} > tol {tol:.3e})"
        );
    }
}
