//! Finite-difference checks and shape invariants for the Gaussian
//! parameter activations.

mod support;

use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::Rng;
use splatstyle_core::field::{
    build_covariance, build_covariance_backward, sh_to_color, sh_to_color_backward,
};
use support::{assert_grad_matches, rng};

#[test]
fn covariance_gradients_match_finite_differences() {
    for seed in 0..6 {
        let mut r = rng(seed);
        let mut upstream = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..=i {
                let v = r.gen_range(-1.0f32..1.0);
                upstream[(i, j)] = v;
                upstream[(j, i)] = v;
            }
        }
        let q: [f32; 4] = std::array::from_fn(|_| r.gen_range(-1.0f32..1.0));
        let ls = Vector3::new(
            r.gen_range(-1.0f32..0.5),
            r.gen_range(-1.0f32..0.5),
            r.gen_range(-1.0f32..0.5),
        );

        let loss = |p: &[f32]| {
            let q = [p[0], p[1], p[2], p[3]];
            let ls = Vector3::new(p[4], p[5], p[6]);
            let cov = build_covariance(&q, &ls);
            upstream.component_mul(&cov).sum()
        };
        let params = [q[0], q[1], q[2], q[3], ls.x, ls.y, ls.z];
        let (d_q, d_ls) = build_covariance_backward(&q, &ls, &upstream);
        let analytic = [d_q[0], d_q[1], d_q[2], d_q[3], d_ls.x, d_ls.y, d_ls.z];
        let mut f = |p: &[f32]| loss(p);
        assert_grad_matches("build_covariance", &mut f, &params, &analytic, 1e-3, 1e-3, 1e-4);
    }
}

#[test]
fn sh_gradients_match_finite_differences() {
    for seed in 0..6 {
        let mut r = rng(seed + 50);
        let degree = 3usize;
        let count = (degree + 1) * (degree + 1);
        let mut sh = vec![[0.0f32; 3]; count];
        // Strong positive DC keeps every channel off the zero clamp.
        sh[0] = [2.0, 2.0, 2.0];
        for coeff in sh.iter_mut().skip(1) {
            for ch in coeff.iter_mut() {
                *ch = r.gen_range(-0.2f32..0.2);
            }
        }
        let dir = Vector3::new(
            r.gen_range(-1.0f32..1.0),
            r.gen_range(-1.0f32..1.0),
            r.gen_range(-1.0f32..1.0),
        )
        .normalize();
        let upstream: [f32; 3] = std::array::from_fn(|_| r.gen_range(-1.0f32..1.0));

        let flat: Vec<f32> = sh
            .iter()
            .flat_map(|c| c.iter().copied())
            .chain([dir.x, dir.y, dir.z])
            .collect();

        let eval = |p: &[f32]| {
            let sh: Vec<[f32; 3]> = p[..count * 3]
                .chunks(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
            let dir = Vector3::new(p[count * 3], p[count * 3 + 1], p[count * 3 + 2]);
            let c = sh_to_color(&sh, degree, &dir);
            c[0] * upstream[0] + c[1] * upstream[1] + c[2] * upstream[2]
        };

        let mut d_sh = vec![[0.0f32; 3]; count];
        let mut d_dir = Vector3::zeros();
        sh_to_color_backward(&sh, degree, &dir, &upstream, &mut d_sh, &mut d_dir);
        let analytic: Vec<f32> = d_sh
            .iter()
            .flat_map(|c| c.iter().copied())
            .chain([d_dir.x, d_dir.y, d_dir.z])
            .collect();

        let mut f = |p: &[f32]| eval(p);
        assert_grad_matches("sh_to_color", &mut f, &flat, &analytic, 1e-3, 1e-3, 1e-4);
    }
}

proptest! {
    #[test]
    fn covariance_is_symmetric_positive_definite(
        qw in -1.0f32..1.0, qx in -1.0f32..1.0, qy in -1.0f32..1.0, qz in -1.0f32..1.0,
        l0 in -3.0f32..1.0, l1 in -3.0f32..1.0, l2 in -3.0f32..1.0,
        px in -1.0f32..1.0, py in -1.0f32..1.0, pz in -1.0f32..1.0,
    ) {
        // Degenerate all-zero quaternions are not representable rotations.
        prop_assume!(qw * qw + qx * qx + qy * qy + qz * qz > 1e-3);
        let cov = build_covariance(&[qw, qx, qy, qz], &Vector3::new(l0, l1, l2));
        prop_assert!((cov - cov.transpose()).norm() < 1e-5);
        let probe = Vector3::new(px, py, pz);
        prop_assume!(probe.norm() > 1e-3);
        // Quadratic form of an SPD matrix is positive away from zero.
        let q_form = probe.dot(&(cov * probe));
        prop_assert!(q_form > 0.0, "quadratic form {q_form}");
    }
}
