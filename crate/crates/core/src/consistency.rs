//! Cross-view agreement measurement. Pixels of one view are unprojected
//! through the rendered depth, reprojected into a second view, and the
//! surviving matched pairs are compared with a root-mean-square metric.
//! The ablation runner scores the default stylization pipeline against
//! the per-view renormalizing variant on the same matches.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::field::FeatureGaussian;
use crate::grid::Grid;
use crate::raster::{project_point, rasterize, RasterizeOpts};
use crate::stylizer::{stylize_view, ConvNet, DenseHead};

#[derive(Clone, Debug)]
pub struct MatchOpts {
    /// Pixels below this rendered opacity are treated as background.
    pub alpha_min: f32,
    /// Depth agreement gate as a fraction of the scene's bounding-box
    /// diagonal.
    pub depth_tol: f32,
    /// Reprojection round trip must land within this many pixels of the
    /// starting pixel center.
    pub roundtrip_px: f32,
}

impl Default for MatchOpts {
    fn default() -> Self {
        MatchOpts {
            alpha_min: 0.5,
            depth_tol: 0.01,
            roundtrip_px: 1.0,
        }
    }
}

/// One pixel of view A paired with the pixel of view B that sees the
/// same surface point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelMatch {
    pub ax: u32,
    pub ay: u32,
    pub bx: u32,
    pub by: u32,
}

#[derive(Clone, Debug, Default)]
pub struct MatchSet {
    pub pairs: Vec<PixelMatch>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Bounding-box diagonal of the splat centers; unit scale for clouds
/// that collapse to a point.
pub fn scene_scale(gaussians: &[FeatureGaussian]) -> f32 {
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for g in gaussians {
        for k in 0..3 {
            lo[k] = lo[k].min(g.position[k]);
            hi[k] = hi[k].max(g.position[k]);
        }
    }
    let mut d2 = 0.0;
    for k in 0..3 {
        let e = hi[k] - lo[k];
        if !e.is_finite() {
            return 1.0;
        }
        d2 += e * e;
    }
    let d = d2.sqrt();
    if d > 0.0 {
        d
    } else {
        1.0
    }
}

/// Pixel pairs across two views that observe the same surface point.
///
/// Each covered pixel of view A is unprojected at its alpha-weighted
/// expected depth and reprojected into view B. A pair survives when the
/// landing pixel is covered, its rendered depth agrees with the
/// reprojected point, and unprojecting the landing pixel lands back
/// within `roundtrip_px` of the start. Both gates reject occlusions.
/// Views that share no surface produce an empty set. Rendering uses the
/// rasterizer's default settings.
pub fn build_matches(
    gaussians: &[FeatureGaussian],
    cam_a: &Camera,
    cam_b: &Camera,
    opts: &MatchOpts,
) -> Result<MatchSet> {
    let raster_opts = RasterizeOpts::default();
    let ra = rasterize(gaussians, cam_a, &raster_opts)?;
    let rb = rasterize(gaussians, cam_b, &raster_opts)?;
    let tol = opts.depth_tol * scene_scale(gaussians);
    let mut pairs = Vec::new();
    for ay in 0..cam_a.height as usize {
        for ax in 0..cam_a.width as usize {
            let alpha_a = ra.alpha.at(0, ay, ax);
            if alpha_a < opts.alpha_min {
                continue;
            }
            let depth_a = ra.depth.at(0, ay, ax) / alpha_a;
            if !(depth_a > 0.0) {
                continue;
            }
            let center_a = Vector2::new(ax as f32 + 0.5, ay as f32 + 0.5);
            let world = cam_a.unproject_pixel(center_a.x, center_a.y, depth_a);
            let Some((uv_b, depth_at_b)) = project_point(cam_b, &world) else {
                continue;
            };
            let (bx, by) = (uv_b.x.floor(), uv_b.y.floor());
            if bx < 0.0 || by < 0.0 || bx >= cam_b.width as f32 || by >= cam_b.height as f32 {
                continue;
            }
            let (bx, by) = (bx as usize, by as usize);
            let alpha_b = rb.alpha.at(0, by, bx);
            if alpha_b < opts.alpha_min {
                continue;
            }
            let depth_b = rb.depth.at(0, by, bx) / alpha_b;
            if (depth_b - depth_at_b).abs() > tol {
                continue;
            }
            let back = cam_b.unproject_pixel(bx as f32 + 0.5, by as f32 + 0.5, depth_b);
            let Some((uv_a, _)) = project_point(cam_a, &back) else {
                continue;
            };
            if (uv_a - center_a).norm() > opts.roundtrip_px {
                continue;
            }
            pairs.push(PixelMatch {
                ax: ax as u32,
                ay: ay as u32,
                bx: bx as u32,
                by: by as u32,
            });
        }
    }
    Ok(MatchSet { pairs })
}

fn squared_gap(outputs_a: &Grid, outputs_b: &Grid, matches: &MatchSet) -> Result<(f64, usize)> {
    if outputs_a.channels() != outputs_b.channels() {
        return Err(Error::shape(format!(
            "match comparison across {} vs {} channels",
            outputs_a.channels(),
            outputs_b.channels()
        )));
    }
    let channels = outputs_a.channels();
    let mut sum = 0.0f64;
    for m in &matches.pairs {
        let (ax, ay) = (m.ax as usize, m.ay as usize);
        let (bx, by) = (m.bx as usize, m.by as usize);
        if ay >= outputs_a.height()
            || ax >= outputs_a.width()
            || by >= outputs_b.height()
            || bx >= outputs_b.width()
        {
            return Err(Error::validation(format!(
                "match ({ax}, {ay}) -> ({bx}, {by}) outside the compared grids"
            )));
        }
        for c in 0..channels {
            let d = (outputs_a.at(c, ay, ax) - outputs_b.at(c, by, bx)) as f64;
            sum += d * d;
        }
    }
    Ok((sum, matches.len() * channels))
}

/// Root-mean-square gap between matched pixels, averaged per channel so
/// RGB and wide feature maps report on the same scale. A constant offset
/// of 0.1 in every channel reads back as exactly 0.1.
pub fn consistency_rmse(outputs_a: &Grid, outputs_b: &Grid, matches: &MatchSet) -> Result<f32> {
    if matches.is_empty() {
        return Err(Error::validation(
            "consistency metric is undefined on an empty match set".to_string(),
        ));
    }
    let (sum, count) = squared_gap(outputs_a, outputs_b, matches)?;
    Ok((sum / count as f64).sqrt() as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// The pipeline as trained: one style affine shared by every view.
    Integrated,
    /// Re-normalizes each view's feature map against its own statistics
    /// before the affine, importing per-view jitter.
    ViewSpecific,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Integrated => "integrated",
            Variant::ViewSpecific => "view-specific",
        }
    }
}

/// Everything the ablation runner needs: a converged scene, the trained
/// 2D nets and expansion head, one style, and the view pairs to score.
pub struct ConsistencyJob<'a> {
    pub gaussians: &'a [FeatureGaussian],
    pub cameras: &'a [Camera],
    pub view_pairs: &'a [(usize, usize)],
    pub style: &'a Grid,
    pub style_name: &'a str,
    pub encoder: &'a ConvNet,
    pub decoder: &'a ConvNet,
    pub head: &'a DenseHead,
    pub raster_opts: RasterizeOpts,
    pub match_opts: MatchOpts,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: String,
    pub rmse_rgb: f32,
    pub rmse_feature: f32,
    pub n_matches: usize,
    pub views: Vec<[usize; 2]>,
    pub style: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub reports: Vec<VariantReport>,
    /// integrated / view-specific, present when both variants ran.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rgb_ratio: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_ratio: Option<f32>,
}

/// Scores each requested variant over the job's view pairs. Matches are
/// built once from geometry; each distinct view is stylized once per
/// variant and every pair accumulates into one pooled RMSE.
pub fn ablation_compare(job: &ConsistencyJob, variants: &[Variant]) -> Result<ConsistencyReport> {
    if variants.is_empty() {
        return Err(Error::config("no consistency variants requested".to_string()));
    }
    for &(a, b) in job.view_pairs {
        if a >= job.cameras.len() || b >= job.cameras.len() {
            return Err(Error::config(format!(
                "view pair ({a}, {b}) outside the {} available cameras",
                job.cameras.len()
            )));
        }
    }
    let matches: Vec<MatchSet> = job
        .view_pairs
        .iter()
        .map(|&(a, b)| build_matches(job.gaussians, &job.cameras[a], &job.cameras[b], &job.match_opts))
        .collect::<Result<_>>()?;
    let n_matches: usize = matches.iter().map(MatchSet::len).sum();
    if n_matches == 0 {
        return Err(Error::validation(
            "no cross-view matches; views share no covered surface".to_string(),
        ));
    }

    let mut reports = Vec::new();
    for &variant in variants {
        let mut views: Vec<Option<crate::stylizer::StylizedView>> =
            (0..job.cameras.len()).map(|_| None).collect();
        for &(a, b) in job.view_pairs {
            for v in [a, b] {
                if views[v].is_none() {
                    views[v] = Some(stylize_view(
                        job.gaussians,
                        &job.cameras[v],
                        job.encoder,
                        job.decoder,
                        job.head,
                        job.style,
                        &job.raster_opts,
                        variant == Variant::ViewSpecific,
                    )?);
                }
            }
        }
        let mut rgb = (0.0f64, 0usize);
        let mut feat = (0.0f64, 0usize);
        for (set, &(a, b)) in matches.iter().zip(job.view_pairs) {
            let (va, vb) = (views[a].as_ref().unwrap(), views[b].as_ref().unwrap());
            let g = squared_gap(&va.image, &vb.image, set)?;
            rgb = (rgb.0 + g.0, rgb.1 + g.1);
            let g = squared_gap(&va.stylized_feature, &vb.stylized_feature, set)?;
            feat = (feat.0 + g.0, feat.1 + g.1);
        }
        reports.push(VariantReport {
            variant: variant.as_str().to_string(),
            rmse_rgb: (rgb.0 / rgb.1 as f64).sqrt() as f32,
            rmse_feature: (feat.0 / feat.1 as f64).sqrt() as f32,
            n_matches,
            views: job.view_pairs.iter().map(|&(a, b)| [a, b]).collect(),
            style: job.style_name.to_string(),
        });
    }

    let find = |name: &str| reports.iter().find(|r| r.variant == name);
    let ratio = |f: fn(&VariantReport) -> f32| {
        find("integrated")
            .zip(find("view-specific"))
            .map(|(i, v)| f(i) / f(v).max(f32::MIN_POSITIVE))
    };
    Ok(ConsistencyReport {
        rgb_ratio: ratio(|r| r.rmse_rgb),
        feature_ratio: ratio(|r| r.rmse_feature),
        reports,
    })
}
