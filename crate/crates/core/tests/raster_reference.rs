//! Brute-force compositing reference for the rasterizer.
//!
//! The reference below shares no code with the production path: it runs
//! per pixel over every splat in double precision, with its own rotation,
//! spherical-harmonic and projection formulas, and no footprint culling.
//! Both implement the same documented blending contract (opacity ceiling,
//! exponent cutoff, transmittance stop), so disagreement beyond float
//! noise means a real defect.

mod support;

use nalgebra::{Matrix4, Vector3};
use rand::Rng;
use splatstyle_core::camera::Camera;
use splatstyle_core::field::FeatureGaussian;
use splatstyle_core::raster::{rasterize, RasterizeOpts};

const SH0: f64 = 0.28209479177387814;
const SH1: f64 = 0.4886025119029199;

fn sh_basis_ref(x: f64, y: f64, z: f64) -> [f64; 16] {
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        SH0,
        -SH1 * y,
        SH1 * z,
        -SH1 * x,
        1.0925484305920792 * x * y,
        -1.0925484305920792 * y * z,
        0.31539156525252005 * (2.0 * zz - xx - yy),
        -1.0925484305920792 * x * z,
        0.5462742152960396 * (xx - yy),
        -0.5900435899266435 * y * (3.0 * xx - yy),
        2.890611442640554 * x * y * z,
        -0.4570457994644658 * y * (4.0 * zz - xx - yy),
        0.3731763325901154 * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        -0.4570457994644658 * x * (4.0 * zz - xx - yy),
        1.445305721320277 * z * (xx - yy),
        -0.5900435899266435 * x * (xx - 3.0 * yy),
    ]
}

struct RefSplat {
    u: f64,
    v: f64,
    depth: f64,
    conic: [f64; 3],
    alpha_base: f64,
    color: [f64; 3],
    feature: Vec<f64>,
}

struct RefImage {
    color: Vec<f64>,
    feature: Vec<f64>,
    depth: Vec<f64>,
    alpha: Vec<f64>,
}

/// All-pairs per-pixel compositing in f64.
fn naive_render(
    gaussians: &[FeatureGaussian],
    camera: &Camera,
    opts: &RasterizeOpts,
) -> RefImage {
    let w = camera.width as usize;
    let h = camera.height as usize;
    let fdim = gaussians.first().map_or(0, |g| g.feature.len());

    // Camera pose in f64.
    let m = &camera.camera_to_world;
    let rot: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)] as f64));
    let origin = [m[(0, 3)] as f64, m[(1, 3)] as f64, m[(2, 3)] as f64];
    let (fx, fy) = (camera.fx as f64, camera.fy as f64);
    let (cx, cy) = (camera.cx as f64, camera.cy as f64);

    let mut splats: Vec<RefSplat> = Vec::new();
    for g in gaussians {
        // World to camera: transpose(R) * (p - o).
        let p = [
            g.position.x as f64 - origin[0],
            g.position.y as f64 - origin[1],
            g.position.z as f64 - origin[2],
        ];
        let t: [f64; 3] =
            std::array::from_fn(|r| rot[0][r] * p[0] + rot[1][r] * p[1] + rot[2][r] * p[2]);
        let d = -t[2];
        if d < opts.near_clip as f64 {
            continue;
        }
        let u = fx * t[0] / d + cx;
        let v = cy - fy * t[1] / d;

        // Rotation matrix from the normalized quaternion.
        let qn = {
            let q: [f64; 4] = std::array::from_fn(|i| g.rotation[i] as f64);
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
        };
        let (qw, qx, qy, qz) = (qn[0], qn[1], qn[2], qn[3]);
        let r3 = [
            [
                1.0 - 2.0 * (qy * qy + qz * qz),
                2.0 * (qx * qy - qw * qz),
                2.0 * (qx * qz + qw * qy),
            ],
            [
                2.0 * (qx * qy + qw * qz),
                1.0 - 2.0 * (qx * qx + qz * qz),
                2.0 * (qy * qz - qw * qx),
            ],
            [
                2.0 * (qx * qz - qw * qy),
                2.0 * (qy * qz + qw * qx),
                1.0 - 2.0 * (qx * qx + qy * qy),
            ],
        ];
        let s = [
            (g.log_scales.x as f64).exp(),
            (g.log_scales.y as f64).exp(),
            (g.log_scales.z as f64).exp(),
        ];
        // cov3d = M M^T with M = R diag(s).
        let mut cov3 = [[0.0f64; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                cov3[a][b] = (0..3).map(|k| r3[a][k] * s[k] * r3[b][k] * s[k]).sum();
            }
        }
        // V = W cov3 W^T with W = transpose(rot).
        let mut v_cam = [[0.0f64; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                let mut acc = 0.0;
                for i in 0..3 {
                    for jj in 0..3 {
                        acc += rot[i][a] * cov3[i][jj] * rot[jj][b];
                    }
                }
                v_cam[a][b] = acc;
            }
        }
        let j = [
            [fx / d, 0.0, fx * t[0] / (d * d)],
            [0.0, -fy / d, -fy * t[1] / (d * d)],
        ];
        let mut c2 = [[0.0f64; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let mut acc = 0.0;
                for i in 0..3 {
                    for jj in 0..3 {
                        acc += j[a][i] * v_cam[i][jj] * j[b][jj];
                    }
                }
                c2[a][b] = acc;
            }
        }
        c2[0][0] += 0.3;
        c2[1][1] += 0.3;
        let det = c2[0][0] * c2[1][1] - c2[0][1] * c2[0][1];
        if det <= 0.0 {
            continue;
        }
        let conic = [c2[1][1] / det, -c2[0][1] / det, c2[0][0] / det];

        // View-dependent color, clamped below at zero after the 0.5 bias.
        let dist = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let dir = [p[0] / dist, p[1] / dist, p[2] / dist];
        let basis = sh_basis_ref(dir[0], dir[1], dir[2]);
        let mut color = [0.5f64; 3];
        for (i, coeff) in g.sh.iter().enumerate() {
            for ch in 0..3 {
                color[ch] += basis[i] * coeff[ch] as f64;
            }
        }
        for ch in &mut color {
            *ch = ch.max(0.0);
        }

        let alpha_base = 1.0 / (1.0 + (-(g.opacity_logit as f64)).exp());
        splats.push(RefSplat {
            u,
            v,
            depth: d,
            conic,
            alpha_base,
            color,
            feature: g.feature.iter().map(|&f| f as f64).collect(),
        });
    }
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| splats[a].depth.total_cmp(&splats[b].depth).then(a.cmp(&b)));

    let mut img = RefImage {
        color: vec![0.0; 3 * h * w],
        feature: vec![0.0; fdim * h * w],
        depth: vec![0.0; h * w],
        alpha: vec![0.0; h * w],
    };
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let pix = y * w + x;
            let mut t_acc = 1.0f64;
            for &si in &order {
                let s = &splats[si];
                let dx = px - s.u;
                let dy = py - s.v;
                let power =
                    -0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
                if power < opts.exponent_cutoff as f64 || power > 0.0 {
                    continue;
                }
                let alpha = (s.alpha_base * power.exp()).min(opts.alpha_clamp as f64);
                let wgt = t_acc * alpha;
                for ch in 0..3 {
                    img.color[ch * h * w + pix] += wgt * s.color[ch];
                }
                for (k, f) in s.feature.iter().enumerate() {
                    img.feature[k * h * w + pix] += wgt * f;
                }
                img.depth[pix] += wgt * s.depth;
                img.alpha[pix] += wgt;
                t_acc *= 1.0 - alpha;
                if t_acc < opts.transmittance_eps as f64 {
                    break;
                }
            }
        }
    }
    img
}

fn random_cloud(seed: u64, n: usize, sh_len: usize, fdim: usize) -> Vec<FeatureGaussian> {
    let mut rng = support::rng(seed);
    (0..n)
        .map(|_| {
            let mut g = FeatureGaussian::plain(
                Vector3::new(
                    rng.gen_range(-0.7..0.7),
                    rng.gen_range(-0.7..0.7),
                    rng.gen_range(-0.7..0.7),
                ),
                1.0,
                fdim,
            );
            g.rotation = std::array::from_fn(|_| rng.gen_range(-1.0..1.0f32));
            let norm = g.rotation.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm < 0.1 {
                g.rotation = [1.0, 0.0, 0.0, 0.0];
            }
            g.log_scales = Vector3::new(
                rng.gen_range(-2.5..-1.2),
                rng.gen_range(-2.5..-1.2),
                rng.gen_range(-2.5..-1.2),
            );
            g.opacity_logit = rng.gen_range(-2.0..2.0);
            g.sh = (0..sh_len)
                .map(|i| {
                    if i == 0 {
                        std::array::from_fn(|_| rng.gen_range(0.0..1.0))
                    } else {
                        std::array::from_fn(|_| rng.gen_range(-0.2..0.2))
                    }
                })
                .collect();
            g.feature = (0..fdim).map(|_| rng.gen_range(0.0..1.0)).collect();
            g
        })
        .collect()
}

fn ring_camera(seed: u64, idx: usize) -> Camera {
    let mut rng = support::rng(seed.wrapping_add(idx as u64 * 77));
    let angle = rng.gen_range(0.0..std::f32::consts::TAU);
    let eye = Vector3::new(
        2.2 * angle.cos(),
        rng.gen_range(-0.5..0.8),
        2.2 * angle.sin(),
    );
    Camera::look_at(eye, Vector3::zeros(), Vector3::y(), 20.0, 20.0, 24, 18).unwrap()
}

fn compare(label: &str, got: &[f32], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len(), "{label}: plane sizes differ");
    let mut worst = 0.0f64;
    for (g, w) in got.iter().zip(want) {
        worst = worst.max((*g as f64 - w).abs());
    }
    assert!(worst <= tol, "{label}: worst abs diff {worst:.3e} > {tol:.0e}");
}

fn check_scene(gaussians: &[FeatureGaussian], camera: &Camera) {
    let opts = RasterizeOpts::default();
    let out = rasterize(gaussians, camera, &opts).unwrap();
    let reference = naive_render(gaussians, camera, &opts);
    let max_depth = reference.depth.iter().cloned().fold(0.0, f64::max).max(1.0);
    compare("color", out.color.data(), &reference.color, 1e-4);
    compare("feature", out.feature.data(), &reference.feature, 1e-4);
    compare("alpha", out.alpha.data(), &reference.alpha, 1e-4);
    compare("depth", out.depth.data(), &reference.depth, 1e-4 * max_depth);
}

#[test]
fn matches_reference_low_degree() {
    for seed in [1u64, 2, 3] {
        let cloud = random_cloud(seed, 35, 1, 5);
        check_scene(&cloud, &ring_camera(seed, 0));
    }
}

#[test]
fn matches_reference_degree_one_and_two() {
    for (seed, sh_len) in [(10u64, 4usize), (11, 9), (12, 9)] {
        let cloud = random_cloud(seed, 40, sh_len, 5);
        check_scene(&cloud, &ring_camera(seed, 1));
    }
}

#[test]
fn matches_reference_degree_three() {
    let cloud = random_cloud(21, 25, 16, 4);
    check_scene(&cloud, &ring_camera(21, 2));
}

#[test]
fn matches_reference_with_opaque_wall() {
    // Many near-opaque overlapping splats drive transmittance through the
    // stop threshold on most pixels.
    let mut cloud = random_cloud(31, 30, 1, 3);
    for g in &mut cloud {
        g.opacity_logit = 6.0;
        g.log_scales = Vector3::new(-1.0, -1.0, -1.0);
        for v in &mut g.sh[0] {
            *v = v.min(0.9);
        }
        for f in &mut g.feature {
            *f = f.min(0.9);
        }
    }
    check_scene(&cloud, &ring_camera(31, 3));
}

#[test]
fn frozen_single_splat_values() {
    // Identity pose, fx = fy = 10, principal point on the pixel grid
    // center. A splat 5 units ahead with scale 0.1 projects to variance
    // (10/5)^2 * 0.01 + 0.3 = 0.34 on both axes.
    let camera = Camera::new(Matrix4::identity(), 10.0, 10.0, 4.5, 4.5, 9, 9).unwrap();
    let mut g = FeatureGaussian::plain(Vector3::new(0.0, 0.0, -5.0), 0.1, 1);
    g.sh[0] = [0.2, 0.2, 0.2];
    g.feature = vec![1.0];
    let out = rasterize(&[g], &camera, &RasterizeOpts::default()).unwrap();

    // Center pixel: weight 1, alpha sigmoid(0) = 0.5.
    assert!((out.alpha.at(0, 4, 4) - 0.5).abs() < 1e-6);
    // One pixel off-center: exponent -0.5 / 0.34, weight 0.2297903.
    let expect_alpha = 0.5 * 0.2297903;
    assert!(
        (out.alpha.at(0, 4, 5) - expect_alpha).abs() < 1e-6,
        "alpha {}",
        out.alpha.at(0, 4, 5)
    );
    // Color there: alpha * (0.5 + 0.28209479 * 0.2) = 0.063930.
    assert!(
        (out.color.at(0, 4, 5) - 0.063_930).abs() < 1e-5,
        "color {}",
        out.color.at(0, 4, 5)
    );
    // Blended depth: alpha * 5.
    assert!((out.depth.at(0, 4, 5) - expect_alpha * 5.0).abs() < 1e-5);
    // Symmetry: the four axis neighbours of the center match exactly.
    let neighbours = [
        out.alpha.at(0, 4, 5),
        out.alpha.at(0, 4, 3),
        out.alpha.at(0, 5, 4),
        out.alpha.at(0, 3, 4),
    ];
    for n in &neighbours {
        assert!((n - neighbours[0]).abs() < 1e-7);
    }
}

#[test]
fn render_is_deterministic() {
    let cloud = random_cloud(41, 40, 4, 6);
    let camera = ring_camera(41, 4);
    let opts = RasterizeOpts::default();
    let a = rasterize(&cloud, &camera, &opts).unwrap();
    let b = rasterize(&cloud, &camera, &opts).unwrap();
    for (x, y) in a.color.data().iter().zip(b.color.data()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    for (x, y) in a.feature.data().iter().zip(b.feature.data()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}
