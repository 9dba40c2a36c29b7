//! Anisotropic 3D Gaussians carrying color harmonics and a latent feature
//! vector, plus the parameter activations the rasterizer consumes.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Default latent feature width when a point cloud does not declare one.
pub const DEFAULT_FEATURE_DIM: usize = 32;

pub const SH_C0: f32 = 0.282_094_79;
const SH_C1: f32 = 0.488_602_5;
const SH_C2: [f32; 5] = [1.092_548_4, -1.092_548_4, 0.315_391_57, -1.092_548_4, 0.546_274_2];
const SH_C3: [f32; 7] = [
    -0.590_043_6,
    2.890_611_4,
    -0.457_045_8,
    0.373_176_33,
    -0.457_045_8,
    1.445_305_7,
    -0.590_043_6,
];

/// One splat. Rotation is a raw (w, x, y, z) quaternion normalized at use,
/// scales are stored as logs, opacity as a logit; `sh` holds (degree+1)^2
/// RGB coefficient triples with the DC term first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGaussian {
    pub position: Vector3<f32>,
    pub rotation: [f32; 4],
    pub log_scales: Vector3<f32>,
    pub opacity_logit: f32,
    pub sh: Vec<[f32; 3]>,
    pub feature: Vec<f32>,
}

impl FeatureGaussian {
    /// Isotropic gray splat at `position` with zero features.
    pub fn plain(position: Vector3<f32>, scale: f32, feature_dim: usize) -> Self {
        FeatureGaussian {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scales: Vector3::repeat(scale.ln()),
            opacity_logit: 0.0,
            sh: vec![[0.0; 3]],
            feature: vec![0.0; feature_dim],
        }
    }

    pub fn sh_degree(&self) -> usize {
        sh_degree_for_len(self.sh.len()).expect("sh length is validated at construction")
    }

    pub fn feature_dim(&self) -> usize {
        self.feature.len()
    }
}

/// Degree for a coefficient count when it is a perfect square minus-one law,
/// i.e. len == (degree+1)^2 with degree <= 3.
pub fn sh_degree_for_len(len: usize) -> Result<usize> {
    for degree in 0..=3usize {
        if (degree + 1) * (degree + 1) == len {
            return Ok(degree);
        }
    }
    Err(Error::validation(format!(
        "sh coefficient count {len} is not (degree+1)^2 for degree <= 3"
    )))
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`sigmoid`]; input must lie strictly inside (0, 1).
pub fn logit(p: f32) -> f32 {
    (p / (1.0 - p)).ln()
}

fn normalized_quat(q: &[f32; 4]) -> ([f32; 4], f32) {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    ([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm], norm)
}

fn rotation_matrix(q: &[f32; 4]) -> Matrix3<f32> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// World-space covariance R * S * S^T * R^T from a raw quaternion and log
/// scales. Always symmetric positive definite for finite inputs.
pub fn build_covariance(rotation: &[f32; 4], log_scales: &Vector3<f32>) -> Matrix3<f32> {
    let (q, _) = normalized_quat(rotation);
    let r = rotation_matrix(&q);
    let s = Vector3::new(log_scales.x.exp(), log_scales.y.exp(), log_scales.z.exp());
    let mut m = r;
    for col in 0..3 {
        for row in 0..3 {
            m[(row, col)] *= s[col];
        }
    }
    m * m.transpose()
}

/// Gradients of a scalar through [`build_covariance`] given d(loss)/d(cov).
/// The upstream matrix is symmetrized, matching the symmetric output.
pub fn build_covariance_backward(
    rotation: &[f32; 4],
    log_scales: &Vector3<f32>,
    d_cov: &Matrix3<f32>,
) -> ([f32; 4], Vector3<f32>) {
    let (q, norm) = normalized_quat(rotation);
    let r = rotation_matrix(&q);
    let s = Vector3::new(log_scales.x.exp(), log_scales.y.exp(), log_scales.z.exp());
    let mut m = r;
    for col in 0..3 {
        for row in 0..3 {
            m[(row, col)] *= s[col];
        }
    }
    let g = (d_cov + d_cov.transpose()) * 0.5;
    // cov = M M^T  =>  dL/dM = 2 G M.
    let d_m = 2.0 * g * m;

    // M = R * diag(s): column i of dL/dR is column i of dL/dM times s[i];
    // dL/ds[i] is the dot of column i of dL/dM with column i of R.
    let mut d_log_scales = Vector3::zeros();
    let mut d_r = Matrix3::zeros();
    for col in 0..3 {
        let mut acc = 0.0;
        for row in 0..3 {
            acc += d_m[(row, col)] * r[(row, col)];
            d_r[(row, col)] = d_m[(row, col)] * s[col];
        }
        // d/d log_scale = d/d scale * scale.
        d_log_scales[col] = acc * s[col];
    }

    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dr_dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dr_dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dr_dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dr_dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let d_unit = [
        d_r.component_mul(&dr_dw).sum(),
        d_r.component_mul(&dr_dx).sum(),
        d_r.component_mul(&dr_dy).sum(),
        d_r.component_mul(&dr_dz).sum(),
    ];

    // Through the normalization q_hat = q / |q|: (I - q_hat q_hat^T) / |q|.
    let dot = q[0] * d_unit[0] + q[1] * d_unit[1] + q[2] * d_unit[2] + q[3] * d_unit[3];
    let mut d_q = [0.0f32; 4];
    for i in 0..4 {
        d_q[i] = (d_unit[i] - q[i] * dot) / norm;
    }
    (d_q, d_log_scales)
}

fn sh_basis(dir: &Vector3<f32>, degree: usize) -> [f32; 16] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut b = [0.0f32; 16];
    b[0] = SH_C0;
    if degree >= 1 {
        b[1] = -SH_C1 * y;
        b[2] = SH_C1 * z;
        b[3] = -SH_C1 * x;
    }
    if degree >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[4] = SH_C2[0] * x * y;
        b[5] = SH_C2[1] * y * z;
        b[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        b[7] = SH_C2[3] * x * z;
        b[8] = SH_C2[4] * (xx - yy);
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        b[9] = SH_C3[0] * y * (3.0 * xx - yy);
        b[10] = SH_C3[1] * x * y * z;
        b[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
        b[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
        b[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
        b[14] = SH_C3[5] * z * (xx - yy);
        b[15] = SH_C3[6] * x * (xx - 3.0 * yy);
    }
    b
}

fn sh_basis_jacobian(dir: &Vector3<f32>, degree: usize) -> [[f32; 3]; 16] {
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let mut j = [[0.0f32; 3]; 16];
    if degree >= 1 {
        j[1] = [0.0, -SH_C1, 0.0];
        j[2] = [0.0, 0.0, SH_C1];
        j[3] = [-SH_C1, 0.0, 0.0];
    }
    if degree >= 2 {
        j[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
        j[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
        j[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
        j[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
        j[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
    }
    if degree >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        j[9] = [
            SH_C3[0] * 6.0 * x * y,
            SH_C3[0] * (3.0 * xx - 3.0 * yy),
            0.0,
        ];
        j[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
        j[11] = [
            SH_C3[2] * -2.0 * x * y,
            SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
            SH_C3[2] * 8.0 * y * z,
        ];
        j[12] = [
            SH_C3[3] * -6.0 * x * z,
            SH_C3[3] * -6.0 * y * z,
            SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ];
        j[13] = [
            SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
            SH_C3[4] * -2.0 * x * y,
            SH_C3[4] * 8.0 * x * z,
        ];
        j[14] = [
            SH_C3[5] * 2.0 * x * z,
            SH_C3[5] * -2.0 * y * z,
            SH_C3[5] * (xx - yy),
        ];
        j[15] = [
            SH_C3[6] * (3.0 * xx - 3.0 * yy),
            SH_C3[6] * -6.0 * x * y,
            0.0,
        ];
    }
    j
}

/// RGB from spherical harmonics at a unit view direction: 0.5 plus the
/// basis expansion, clamped below at zero. No upper clamp.
pub fn sh_to_color(sh: &[[f32; 3]], degree: usize, dir: &Vector3<f32>) -> [f32; 3] {
    debug_assert!(sh.len() >= (degree + 1) * (degree + 1));
    let basis = sh_basis(dir, degree);
    let mut color = [0.5f32; 3];
    for (i, coeff) in sh.iter().enumerate().take((degree + 1) * (degree + 1)) {
        for ch in 0..3 {
            color[ch] += basis[i] * coeff[ch];
        }
    }
    for ch in &mut color {
        *ch = ch.max(0.0);
    }
    color
}

/// Gradients through [`sh_to_color`]. Channels clamped at zero contribute
/// nothing. Returns d(loss)/d(sh) and d(loss)/d(dir); the caller chains the
/// direction through its own normalization.
pub fn sh_to_color_backward(
    sh: &[[f32; 3]],
    degree: usize,
    dir: &Vector3<f32>,
    d_color: &[f32; 3],
    d_sh: &mut [[f32; 3]],
    d_dir: &mut Vector3<f32>,
) {
    let basis = sh_basis(dir, degree);
    let jac = sh_basis_jacobian(dir, degree);
    let color = sh_to_color(sh, degree, dir);
    let mut up = [0.0f32; 3];
    for ch in 0..3 {
        up[ch] = if color[ch] > 0.0 { d_color[ch] } else { 0.0 };
    }
    let count = (degree + 1) * (degree + 1);
    for i in 0..count {
        let mut coupled = 0.0;
        for ch in 0..3 {
            d_sh[i][ch] += basis[i] * up[ch];
            coupled += sh[i][ch] * up[ch];
        }
        d_dir.x += coupled * jac[i][0];
        d_dir.y += coupled * jac[i][1];
        d_dir.z += coupled * jac[i][2];
    }
}

/// Splat parameters after activation: world covariance and opacity in
/// (0, 1). Color is view dependent and evaluated by the rasterizer.
#[derive(Clone, Debug)]
pub struct Activated {
    pub position: Vector3<f32>,
    pub covariance: Matrix3<f32>,
    pub alpha: f32,
}

pub fn activate(g: &FeatureGaussian) -> Activated {
    Activated {
        position: g.position,
        covariance: build_covariance(&g.rotation, &g.log_scales),
        alpha: sigmoid(g.opacity_logit),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_rotation_gives_diagonal_covariance() {
        let ls = Vector3::new(2.0f32.ln(), 3.0f32.ln(), 4.0f32.ln());
        let cov = build_covariance(&[1.0, 0.0, 0.0, 0.0], &ls);
        let expected = Matrix3::from_diagonal(&Vector3::new(4.0, 9.0, 16.0));
        assert!((cov - expected).norm() < 1e-4, "{cov}");
    }

    #[test]
    fn quarter_turn_about_z_swaps_xy_variances() {
        // 90 degrees about z maps the local x axis onto world y.
        let half = std::f32::consts::FRAC_PI_4;
        let q = [half.cos(), 0.0, 0.0, half.sin()];
        let ls = Vector3::new(2.0f32.ln(), 3.0f32.ln(), 4.0f32.ln());
        let cov = build_covariance(&q, &ls);
        let expected = Matrix3::from_diagonal(&Vector3::new(9.0, 4.0, 16.0));
        assert!((cov - expected).norm() < 1e-3, "{cov}");
    }

    #[test]
    fn covariance_ignores_quaternion_magnitude() {
        let ls = Vector3::new(-0.5, 0.2, 0.8);
        let q = [0.4, -0.3, 0.7, 0.2];
        let scaled = [q[0] * 3.0, q[1] * 3.0, q[2] * 3.0, q[3] * 3.0];
        let a = build_covariance(&q, &ls);
        let b = build_covariance(&scaled, &ls);
        assert!((a - b).norm() < 1e-5);
    }

    #[test]
    fn dc_only_color_matches_constant() {
        let sh = vec![[0.3, -0.1, 1.2]];
        let c = sh_to_color(&sh, 0, &Vector3::new(0.0, 0.0, 1.0));
        for ch in 0..3 {
            let expected = (0.5 + SH_C0 * sh[0][ch]).max(0.0);
            assert!((c[ch] - expected).abs() < 1e-7);
        }
    }

    #[test]
    fn degree_one_axis_direction() {
        // Along +z only the b2 = C1 * z term of degree 1 survives.
        let mut sh = vec![[0.0; 3]; 4];
        sh[0] = [0.1, 0.2, 0.3];
        sh[1] = [9.0, 9.0, 9.0];
        sh[2] = [0.4, -0.2, 0.1];
        sh[3] = [7.0, 7.0, 7.0];
        let dir = Vector3::new(0.0, 0.0, 1.0);
        let c = sh_to_color(&sh, 1, &dir);
        for ch in 0..3 {
            let expected = (0.5 + SH_C0 * sh[0][ch] + 0.488_602_5 * sh[2][ch]).max(0.0);
            assert!((c[ch] - expected).abs() < 1e-6, "channel {ch}");
        }
    }

    #[test]
    fn color_clamps_below_zero() {
        let sh = vec![[-10.0, 0.0, 0.0]];
        let c = sh_to_color(&sh, 0, &Vector3::z());
        assert_eq!(c[0], 0.0);
        let mut d_sh = vec![[0.0f32; 3]];
        let mut d_dir = Vector3::zeros();
        sh_to_color_backward(&sh, 0, &Vector3::z(), &[1.0, 1.0, 1.0], &mut d_sh, &mut d_dir);
        // Clamped channel is flat; the others keep the DC sensitivity.
        assert_eq!(d_sh[0][0], 0.0);
        assert!((d_sh[0][1] - SH_C0).abs() < 1e-7);
    }

    #[test]
    fn sigmoid_logit_roundtrip() {
        for p in [0.01f32, 0.3, 0.5, 0.97] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-6);
        }
    }

    #[test]
    fn degree_from_len() {
        assert_eq!(sh_degree_for_len(1).unwrap(), 0);
        assert_eq!(sh_degree_for_len(4).unwrap(), 1);
        assert_eq!(sh_degree_for_len(9).unwrap(), 2);
        assert_eq!(sh_degree_for_len(16).unwrap(), 3);
        assert!(sh_degree_for_len(5).is_err());
    }
}
