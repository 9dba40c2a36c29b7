//! Per-splat projection to screen space and its exact gradient.
//!
//! A splat's world covariance is pushed through the camera by the local
//! affine approximation of the perspective map: cov2d = J W cov W' J' plus
//! a fixed 0.3 px floor that keeps the footprint at least a pixel wide.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::camera::Camera;
use crate::field::{
    build_covariance, build_covariance_backward, sh_to_color, sh_to_color_backward, sigmoid,
    FeatureGaussian,
};
use crate::raster::RasterizeOpts;

pub(crate) const COV2D_FLOOR: f32 = 0.3;

/// One splat after projection and culling, in evaluation order.
#[derive(Clone, Debug)]
pub(crate) struct Projected {
    pub splat_id: usize,
    /// Screen position (u, v) of the center.
    pub mean2d: [f32; 2],
    /// Inverse 2D covariance (a, b, c): falloff exponent is
    /// -0.5 (a dx^2 + 2 b dx dy + c dy^2).
    pub conic: [f32; 3],
    pub depth: f32,
    pub alpha_base: f32,
    pub color: [f32; 3],
    /// Pixel bounds [x0, x1) x [y0, y1) that can receive weight above the
    /// exponent cutoff.
    pub x_range: (usize, usize),
    pub y_range: (usize, usize),
}

/// Gradients of one splat's parameters.
#[derive(Clone, Debug, Default)]
pub struct SplatGrads {
    pub position: Vector3<f32>,
    pub rotation: [f32; 4],
    pub log_scales: Vector3<f32>,
    pub opacity_logit: f32,
}

fn camera_jacobian(camera: &Camera, t: &Vector3<f32>) -> Matrix2x3<f32> {
    let d = -t.z;
    Matrix2x3::new(
        camera.fx / d,
        0.0,
        camera.fx * t.x / (d * d),
        0.0,
        -camera.fy / d,
        -camera.fy * t.y / (d * d),
    )
}

pub(crate) fn cov2d_of(camera: &Camera, t: &Vector3<f32>, cov_world: &Matrix3<f32>) -> Matrix2<f32> {
    let w = camera.rotation().transpose();
    let j = camera_jacobian(camera, t);
    let cov_cam = w * cov_world * w.transpose();
    let mut c2 = j * cov_cam * j.transpose();
    c2[(0, 0)] += COV2D_FLOOR;
    c2[(1, 1)] += COV2D_FLOOR;
    c2
}

/// Project one splat; `None` when it cannot touch the image (behind the
/// camera, degenerate footprint, or bounds outside the frame).
pub(crate) fn project_one(
    id: usize,
    g: &FeatureGaussian,
    camera: &Camera,
    opts: &RasterizeOpts,
) -> Option<Projected> {
    let t = camera.world_to_camera(&g.position);
    let d = -t.z;
    if !d.is_finite() || d < opts.near_clip {
        return None;
    }
    let u = camera.fx * t.x / d + camera.cx;
    let v = camera.cy - camera.fy * t.y / d;

    let cov_world = build_covariance(&g.rotation, &g.log_scales);
    let c2 = cov2d_of(camera, &t, &cov_world);
    let det = c2[(0, 0)] * c2[(1, 1)] - c2[(0, 1)] * c2[(0, 1)];
    if !(det > 1e-12) || !det.is_finite() {
        return None;
    }
    let conic = [c2[(1, 1)] / det, -c2[(0, 1)] / det, c2[(0, 0)] / det];

    // Largest eigenvalue bounds the reach: beyond sqrt(2 |cutoff| lmax)
    // pixels the exponent is below the cutoff.
    let mid = 0.5 * (c2[(0, 0)] + c2[(1, 1)]);
    let lmax = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = (2.0 * opts.exponent_cutoff.abs() * lmax).sqrt();
    if !radius.is_finite() {
        return None;
    }

    let clamp_px = |lo: f32, n: u32| -> (usize, usize) {
        let a = lo.floor().max(0.0) as usize;
        (a.min(n as usize), n as usize)
    };
    // Pixel x has center x + 0.5; cover |center - u| <= radius.
    let (x0, xn) = clamp_px(u - radius - 0.5, camera.width);
    let x1 = ((u + radius - 0.5).ceil().max(0.0) as usize + 1).min(xn);
    let (y0, yn) = clamp_px(v - radius - 0.5, camera.height);
    let y1 = ((v + radius - 0.5).ceil().max(0.0) as usize + 1).min(yn);
    if x0 >= x1 || y0 >= y1 {
        return None;
    }

    let delta = g.position - camera.origin();
    let dist = delta.norm();
    if dist <= 0.0 {
        return None;
    }
    let dir = delta / dist;
    let color = sh_to_color(&g.sh, g.sh_degree(), &dir);

    Some(Projected {
        splat_id: id,
        mean2d: [u, v],
        conic,
        depth: d,
        alpha_base: sigmoid(g.opacity_logit),
        color,
        x_range: (x0, x1),
        y_range: (y0, y1),
    })
}

/// Pull accumulated screen-space gradients back to the splat parameters.
/// `d_mean2d`, `d_conic`, `d_alpha_base`, `d_color` and `d_depth` are the
/// sums over every pixel the splat blended into.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backprop_projection(
    g: &FeatureGaussian,
    camera: &Camera,
    d_mean2d: [f32; 2],
    d_conic: [f32; 3],
    d_alpha_base: f32,
    d_color: [f32; 3],
    d_depth: f32,
    d_sh: &mut [[f32; 3]],
) -> SplatGrads {
    let t = camera.world_to_camera(&g.position);
    let d = -t.z;
    let w = camera.rotation().transpose();
    let j = camera_jacobian(camera, &t);
    let cov_world = build_covariance(&g.rotation, &g.log_scales);
    let cov_cam = w * cov_world * w.transpose();
    let mut c2 = j * cov_cam * j.transpose();
    c2[(0, 0)] += COV2D_FLOOR;
    c2[(1, 1)] += COV2D_FLOOR;
    let det = c2[(0, 0)] * c2[(1, 1)] - c2[(0, 1)] * c2[(0, 1)];
    let q = Matrix2::new(c2[(1, 1)], -c2[(0, 1)], -c2[(0, 1)], c2[(0, 0)]) / det;

    // conic = inv(cov2d): d(cov2d) = -Q G_Q Q with the off-diagonal upstream
    // split across its two matrix slots.
    let g_q = Matrix2::new(d_conic[0], 0.5 * d_conic[1], 0.5 * d_conic[1], d_conic[2]);
    let g2 = -q * g_q * q;
    let g_cam = j.transpose() * g2 * j;
    // cov2d = J V J': both J factors contribute, and G2 is symmetric.
    let g_j = 2.0 * g2 * j * cov_cam;
    let g_world = w.transpose() * g_cam * w;
    let (d_rotation, d_log_scales) = build_covariance_backward(&g.rotation, &g.log_scales, &g_world);

    // J and (u, v) depend on the camera-space position; d = -t.z flips the
    // sign of every z derivative.
    let fx = camera.fx;
    let fy = camera.fy;
    let d2 = d * d;
    let d3 = d2 * d;
    let mut d_t = Vector3::new(
        g_j[(0, 2)] * fx / d2 + d_mean2d[0] * fx / d,
        -g_j[(1, 2)] * fy / d2 - d_mean2d[1] * fy / d,
        g_j[(0, 0)] * fx / d2 - g_j[(1, 1)] * fy / d2
            + g_j[(0, 2)] * 2.0 * fx * t.x / d3
            - g_j[(1, 2)] * 2.0 * fy * t.y / d3
            + d_mean2d[0] * fx * t.x / d2
            - d_mean2d[1] * fy * t.y / d2,
    );
    d_t.z -= d_depth;
    let mut d_position = camera.rotation() * d_t;

    // View-dependent color: chain through dir = (mu - origin) / dist.
    let delta = g.position - camera.origin();
    let dist = delta.norm();
    let dir = delta / dist;
    let mut d_dir = Vector3::zeros();
    sh_to_color_backward(&g.sh, g.sh_degree(), &dir, &d_color, d_sh, &mut d_dir);
    d_position += (d_dir - dir * dir.dot(&d_dir)) / dist;

    let a = sigmoid(g.opacity_logit);
    SplatGrads {
        position: d_position,
        rotation: d_rotation,
        log_scales: d_log_scales,
        opacity_logit: d_alpha_base * a * (1.0 - a),
    }
}

/// Screen-space center of a splat, for tests and the consistency matcher.
pub fn project_point(camera: &Camera, p: &Vector3<f32>) -> Option<(Vector2<f32>, f32)> {
    let t = camera.world_to_camera(p);
    let d = -t.z;
    if d <= 0.0 {
        return None;
    }
    Some((
        Vector2::new(
            camera.fx * t.x / d + camera.cx,
            camera.cy - camera.fy * t.y / d,
        ),
        d,
    ))
}
