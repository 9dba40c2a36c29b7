//! Procedural toy scenes: a random Gaussian cloud rendered from a camera
//! ring, with noisy point samples and a synthetic style image. Everything
//! is a pure function of the seed, so fixtures are reproducible across
//! tests, benches and command-line walkthroughs.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera::Camera;
use crate::error::Result;
use crate::field::{logit, FeatureGaussian, DEFAULT_FEATURE_DIM, SH_C0};
use crate::grid::Grid;
use crate::io::scene::SceneDataset;
use crate::raster::{rasterize, RasterizeOpts};

pub struct SynthConfig {
    pub views: usize,
    pub width: u32,
    pub height: u32,
    pub gaussians: usize,
    /// Focal length as a multiple of the image width. Larger values
    /// narrow the view so the splat ball fills the frame.
    pub focal: f32,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            views: 8,
            width: 64,
            height: 48,
            gaussians: 60,
            focal: 0.8,
            feature_dim: DEFAULT_FEATURE_DIM,
            seed: 7,
        }
    }
}

pub struct SynthScene {
    pub dataset: SceneDataset,
    /// Ground-truth cloud the images were rendered from.
    pub cloud: Vec<FeatureGaussian>,
    /// Noisy samples of the cloud centers, as a capture would provide.
    pub points: Vec<Vector3<f32>>,
}

fn random_unit_quat(rng: &mut ChaCha8Rng) -> [f32; 4] {
    loop {
        let q: [f32; 4] = [
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if n > 0.2 {
            return [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        }
    }
}

/// Cloud of colorful anisotropic splats inside the unit ball.
pub fn synth_cloud(rng: &mut ChaCha8Rng, count: usize, feature_dim: usize) -> Vec<FeatureGaussian> {
    (0..count)
        .map(|_| {
            let position = loop {
                let p = Vector3::new(
                    rng.gen_range(-1.0f32..1.0),
                    rng.gen_range(-1.0f32..1.0),
                    rng.gen_range(-1.0f32..1.0),
                );
                if p.norm() <= 1.0 {
                    break p;
                }
            };
            let base_scale = rng.gen_range(0.05f32..0.15).ln();
            let color: [f32; 3] = [
                rng.gen_range(0.15f32..0.95),
                rng.gen_range(0.15f32..0.95),
                rng.gen_range(0.15f32..0.95),
            ];
            let mut sh = vec![[0.0f32; 3]; 4];
            sh[0] = [
                (color[0] - 0.5) / SH_C0,
                (color[1] - 0.5) / SH_C0,
                (color[2] - 0.5) / SH_C0,
            ];
            for band in sh.iter_mut().skip(1) {
                for c in band.iter_mut() {
                    *c = rng.gen_range(-0.15..0.15);
                }
            }
            FeatureGaussian {
                position,
                rotation: random_unit_quat(rng),
                log_scales: Vector3::new(
                    base_scale + rng.gen_range(-0.4f32..0.4),
                    base_scale + rng.gen_range(-0.4f32..0.4),
                    base_scale + rng.gen_range(-0.4f32..0.4),
                ),
                opacity_logit: logit(rng.gen_range(0.6f32..0.95)),
                sh,
                feature: vec![0.0; feature_dim],
            }
        })
        .collect()
}

/// Ring of inward-looking cameras with mild height variation.
pub fn synth_cameras(cfg: &SynthConfig) -> Result<Vec<Camera>> {
    let focal = cfg.focal * cfg.width as f32;
    (0..cfg.views)
        .map(|i| {
            let angle = i as f32 / cfg.views as f32 * std::f32::consts::TAU;
            let eye = Vector3::new(
                2.4 * angle.cos(),
                0.5 * (angle * 2.0).sin(),
                2.4 * angle.sin(),
            );
            Camera::look_at(
                eye,
                Vector3::zeros(),
                Vector3::new(0.0, 1.0, 0.0),
                focal,
                focal,
                cfg.width,
                cfg.height,
            )
        })
        .collect()
}

pub fn synth_scene(cfg: &SynthConfig) -> Result<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cloud = synth_cloud(&mut rng, cfg.gaussians, cfg.feature_dim);
    let cameras = synth_cameras(cfg)?;
    let opts = RasterizeOpts::default();
    let images = cameras
        .iter()
        .map(|cam| Ok(rasterize(&cloud, cam, &opts)?.color))
        .collect::<Result<Vec<_>>>()?;
    let points = cloud
        .iter()
        .map(|g| {
            g.position
                + Vector3::new(
                    rng.gen_range(-0.02f32..0.02),
                    rng.gen_range(-0.02f32..0.02),
                    rng.gen_range(-0.02f32..0.02),
                )
        })
        .collect();
    Ok(SynthScene {
        dataset: SceneDataset::new(cameras, images)?,
        cloud,
        points,
    })
}

/// Smooth multi-frequency color field with a few soft disks; visually busy
/// enough to carry distinctive channel statistics.
pub fn synth_style_image(seed: u64, width: usize, height: usize) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f32; 4]> = (0..3)
        .map(|_| {
            [
                rng.gen_range(1.0f32..4.0),
                rng.gen_range(1.0f32..4.0),
                rng.gen_range(0.0f32..std::f32::consts::TAU),
                rng.gen_range(0.3f32..0.7),
            ]
        })
        .collect();
    let disks: Vec<[f32; 6]> = (0..4)
        .map(|_| {
            [
                rng.gen_range(0.1f32..0.9),
                rng.gen_range(0.1f32..0.9),
                rng.gen_range(0.08f32..0.25),
                rng.gen_range(0.0f32..1.0),
                rng.gen_range(0.0f32..1.0),
                rng.gen_range(0.0f32..1.0),
            ]
        })
        .collect();
    let mut img = Grid::zeros(3, height, width);
    for c in 0..3 {
        let [fx, fy, phase, amp] = waves[c];
        let plane = img.channel_mut(c);
        for y in 0..height {
            let v = y as f32 / height as f32;
            for x in 0..width {
                let u = x as f32 / width as f32;
                let mut val = 0.5
                    + 0.5 * amp * (std::f32::consts::TAU * (fx * u + fy * v) + phase).sin();
                for d in &disks {
                    let r2 = (u - d[0]) * (u - d[0]) + (v - d[1]) * (v - d[1]);
                    let fall = (-r2 / (2.0 * d[2] * d[2])).exp();
                    val = val * (1.0 - fall) + d[3 + c] * fall;
                }
                plane[y * width + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    img
}
