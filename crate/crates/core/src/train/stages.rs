//! The three optimization stages: decoder pretraining on 2D images,
//! geometry fitting from posed photographs, and the style stage that
//! lifts the 2D stylizer into the splat feature field.
//!
//! Each stage takes a seeded config, reports one [`IterRecord`] per
//! iteration through a callback, and optionally writes periodic
//! checkpoints under `<dir>/stage-<n>/iter-<k>/`. Checkpoints are staged
//! in a `.tmp` directory and renamed into place, so a reader never sees
//! a partial write. With a fixed seed every stage is bitwise
//! reproducible, and each stage touches only its declared parameter
//! group: stage 2 never reads or writes latent features, stage 3 never
//! touches geometry, opacity, or harmonics.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adam_step, ops, AdamState, Tape};
use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::field::{logit, FeatureGaussian};
use crate::grid::Grid;
use crate::io::scene::SceneDataset;
use crate::raster::{rasterize, rasterize_with_grads, RasterizeOpts, RenderUpstream};
use crate::stylizer::{
    adain, encode_plain, insert_net, run_decoder, run_encoder, run_head, style_code,
    style_stat_loss, ConvNet, DenseHead,
};
use crate::train::losses::{photometric_loss, psnr};

/// Scalar losses of one optimization step, for logs and progress output.
#[derive(Clone, Debug)]
pub struct IterRecord {
    /// 1-based iteration number.
    pub iter: usize,
    pub total: f32,
    /// Named loss components, unweighted.
    pub parts: Vec<(&'static str, f32)>,
}

/// Where and how often a stage snapshots its trainable state.
#[derive(Clone, Debug)]
pub struct StageCheckpoints {
    pub dir: PathBuf,
    pub every: usize,
}

/// Uniform sampling without replacement: one shuffled pass per epoch,
/// reshuffled when exhausted.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        EpochSampler { order: (0..n).collect(), pos: n }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        i
    }
}

fn write_checkpoint(
    ck: &StageCheckpoints,
    stage: u8,
    iter: usize,
    write: impl FnOnce(&Path) -> Result<()>,
) -> Result<()> {
    let stage_dir = ck.dir.join(format!("stage-{stage}"));
    fs::create_dir_all(&stage_dir).map_err(|e| Error::io(&stage_dir, e))?;
    let tmp = stage_dir.join(format!("iter-{iter}.tmp"));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write(&tmp)?;
    let done = stage_dir.join(format!("iter-{iter}"));
    if done.exists() {
        fs::remove_dir_all(&done).map_err(|e| Error::io(&done, e))?;
    }
    fs::rename(&tmp, &done).map_err(|e| Error::io(&done, e))
}

fn checkpoint_due(ck: &Option<StageCheckpoints>, iter: usize) -> bool {
    ck.as_ref().is_some_and(|c| c.every > 0 && iter % c.every == 0)
}

pub struct DecoderStageConfig {
    pub iterations: usize,
    pub lr: f32,
    /// Weight on the style statistics loss against the content loss.
    pub style_weight: f32,
    pub pooled: bool,
    pub seed: u64,
    pub checkpoints: Option<StageCheckpoints>,
}

impl Default for DecoderStageConfig {
    fn default() -> Self {
        DecoderStageConfig {
            iterations: 2000,
            lr: 1e-4,
            style_weight: 1.0,
            pooled: true,
            seed: 0,
            checkpoints: None,
        }
    }
}

/// Stage 1: train the decoder to invert the frozen encoder through the
/// statistics transform. Each step samples a content photo and a style
/// image, moves the deepest content tap onto the style statistics,
/// decodes, and minimizes reconstruction of the transformed tap plus the
/// weighted style statistics loss. Only decoder parameters move.
pub fn pretrain_decoder(
    encoder: &ConvNet,
    mut decoder: ConvNet,
    photos: &[Grid],
    styles: &[Grid],
    cfg: &DecoderStageConfig,
    on_iter: &mut dyn FnMut(&IterRecord) -> Result<()>,
) -> Result<ConvNet> {
    if photos.is_empty() || styles.is_empty() {
        return Err(Error::validation("decoder stage needs photos and styles"));
    }
    let codes: Vec<_> = styles
        .iter()
        .map(|s| style_code(encoder, s, cfg.pooled))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut photo_order = EpochSampler::new(photos.len());
    let mut style_order = EpochSampler::new(styles.len());
    let mut states: Vec<_> = decoder
        .layers
        .iter()
        .map(|l| {
            (
                AdamState::new(l.kernel.data().len()),
                AdamState::new(l.bias.data().len()),
            )
        })
        .collect();

    for it in 1..=cfg.iterations {
        let pi = photo_order.next(&mut rng);
        let si = style_order.next(&mut rng);

        let mut tape = Tape::new();
        let enc_nodes = insert_net(&mut tape, encoder, false);
        let dec_nodes = insert_net(&mut tape, &decoder, true);
        let input = tape.constant(photos[pi].clone());
        let taps = run_encoder(&mut tape, encoder, &enc_nodes, input, cfg.pooled)?;
        let deep = *taps.last().expect("validated encoder has taps");
        let code = codes[si].last().expect("style code matches taps");
        let n = tape.normalize(deep);
        let t = adain(&mut tape, n, code)?;
        let out = run_decoder(&mut tape, &decoder, &dec_nodes, t, cfg.pooled)?;
        let taps2 = run_encoder(&mut tape, encoder, &enc_nodes, out, cfg.pooled)?;
        let deep2 = *taps2.last().expect("validated encoder has taps");
        let l_content = tape.mse(deep2, t)?;
        let l_style = style_stat_loss(&mut tape, &taps2, &codes[si])?;
        let weighted = tape.scale(l_style, cfg.style_weight);
        let loss = tape.add(l_content, weighted)?;
        tape.backward(loss)?;

        for (li, &(k_id, b_id)) in dec_nodes.params.iter().enumerate() {
            let gk = tape.grad(k_id).expect("trainable kernel has a gradient");
            adam_step(
                decoder.layers[li].kernel.data_mut(),
                gk.data(),
                &mut states[li].0,
                cfg.lr,
            );
            let gb = tape.grad(b_id).expect("trainable bias has a gradient");
            adam_step(
                decoder.layers[li].bias.data_mut(),
                gb.data(),
                &mut states[li].1,
                cfg.lr,
            );
        }

        let record = IterRecord {
            iter: it,
            total: tape.value(loss).data()[0],
            parts: vec![
                ("content", tape.value(l_content).data()[0]),
                ("style", tape.value(l_style).data()[0]),
            ],
        };
        on_iter(&record)?;
        if checkpoint_due(&cfg.checkpoints, it) {
            let ck = cfg.checkpoints.as_ref().expect("checked above");
            write_checkpoint(ck, 1, it, |dir| {
                decoder.to_weights().save(&dir.join("decoder"))
            })?;
        }
    }
    Ok(decoder)
}

const OPACITY_INIT: f32 = 0.1;
const INIT_SCALE_MIN: f32 = 1e-3;
const INIT_SCALE_MAX: f32 = 1.0;
// Keeps a runaway splat from growing until it covers every pixel list.
const LOG_SCALE_MIN: f32 = -15.0;
const LOG_SCALE_MAX: f32 = 2.0;

/// Gray, low-opacity splat cloud over the given points. Per-point scale
/// is the distance to the three nearest neighbors, the usual splat
/// seeding heuristic; rotations start at identity and features at zero.
pub fn init_cloud_from_points(
    points: &[Vector3<f32>],
    sh_degree: usize,
    feature_dim: usize,
) -> Result<Vec<FeatureGaussian>> {
    if points.is_empty() {
        return Err(Error::validation("cannot seed a splat cloud from zero points"));
    }
    if sh_degree > 3 {
        return Err(Error::validation(format!(
            "harmonics degree {sh_degree} exceeds 3"
        )));
    }
    let sh_len = (sh_degree + 1) * (sh_degree + 1);
    let cloud = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = [f32::INFINITY; 3];
            for (j, q) in points.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d2 = (p - q).norm_squared();
                if d2 < best[2] {
                    best[2] = d2;
                    best.sort_by(|a, b| a.partial_cmp(b).expect("squared distances are finite"));
                }
            }
            let taken: Vec<f32> = best.into_iter().filter(|d| d.is_finite()).collect();
            let mean_d2 = if taken.is_empty() {
                0.01
            } else {
                taken.iter().sum::<f32>() / taken.len() as f32
            };
            let scale = mean_d2.sqrt().clamp(INIT_SCALE_MIN, INIT_SCALE_MAX);
            FeatureGaussian {
                position: *p,
                rotation: [1.0, 0.0, 0.0, 0.0],
                log_scales: Vector3::repeat(scale.ln()),
                opacity_logit: logit(OPACITY_INIT),
                sh: vec![[0.0; 3]; sh_len],
                feature: vec![0.0; feature_dim],
            }
        })
        .collect();
    Ok(cloud)
}

/// Fallback seeding without a point cloud: uniform samples in a ball
/// around the point nearest all camera optical axes, radius half the
/// median camera distance.
pub fn init_cloud_random(
    cameras: &[Camera],
    count: usize,
    sh_degree: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<Vec<FeatureGaussian>> {
    use rand::Rng;
    if cameras.is_empty() || count == 0 {
        return Err(Error::validation("random seeding needs cameras and a count"));
    }
    let mut a = nalgebra::Matrix3::<f32>::zeros();
    let mut b = Vector3::zeros();
    let mut origins = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let rot = cam.camera_to_world.fixed_view::<3, 3>(0, 0);
        let fwd = -Vector3::new(rot[(0, 2)], rot[(1, 2)], rot[(2, 2)]);
        let o = Vector3::new(
            cam.camera_to_world[(0, 3)],
            cam.camera_to_world[(1, 3)],
            cam.camera_to_world[(2, 3)],
        );
        let proj = nalgebra::Matrix3::identity() - fwd * fwd.transpose();
        a += proj;
        b += proj * o;
        origins.push(o);
    }
    let centroid = origins.iter().sum::<Vector3<f32>>() / origins.len() as f32;
    let center = a.lu().solve(&b).unwrap_or(centroid);
    let mut dists: Vec<f32> = origins.iter().map(|o| (o - center).norm()).collect();
    dists.sort_by(|x, y| x.partial_cmp(y).expect("distances are finite"));
    let radius = (0.5 * dists[dists.len() / 2]).max(0.1);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(count);
    while points.len() < count {
        let p = Vector3::new(
            rng.gen_range(-1.0f32..1.0),
            rng.gen_range(-1.0f32..1.0),
            rng.gen_range(-1.0f32..1.0),
        );
        if p.norm_squared() <= 1.0 {
            points.push(center + p * radius);
        }
    }
    init_cloud_from_points(&points, sh_degree, feature_dim)
}

fn cloud_extent(cloud: &[FeatureGaussian]) -> f32 {
    let mut lo = Vector3::repeat(f32::INFINITY);
    let mut hi = Vector3::repeat(f32::NEG_INFINITY);
    for g in cloud {
        lo = lo.inf(&g.position);
        hi = hi.sup(&g.position);
    }
    (hi - lo).norm().max(1e-3)
}

pub struct GeometryStageConfig {
    pub iterations: usize,
    /// Scaled by the seed cloud's bounding-box diagonal and decayed
    /// exponentially to 1% over `lr_position_decay_steps`.
    pub lr_position: f32,
    /// Decay horizon for the position rate, independent of the run
    /// length so short runs keep positions mobile to the end.
    pub lr_position_decay_steps: usize,
    pub lr_rotation: f32,
    pub lr_scale: f32,
    pub lr_opacity: f32,
    pub lr_sh: f32,
    pub seed: u64,
    pub checkpoints: Option<StageCheckpoints>,
}

impl Default for GeometryStageConfig {
    fn default() -> Self {
        GeometryStageConfig {
            iterations: 2000,
            lr_position: 1.6e-4,
            lr_position_decay_steps: 30_000,
            lr_rotation: 1e-3,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_sh: 2.5e-3,
            seed: 0,
            checkpoints: None,
        }
    }
}

/// Stage 2: fit positions, rotations, scales, opacities, and harmonics
/// to the photographs under the photometric loss, one sampled view per
/// step. Latent features are left untouched.
pub fn pretrain_geometry(
    dataset: &SceneDataset,
    mut cloud: Vec<FeatureGaussian>,
    cfg: &GeometryStageConfig,
    on_iter: &mut dyn FnMut(&IterRecord) -> Result<()>,
) -> Result<Vec<FeatureGaussian>> {
    if dataset.is_empty() {
        return Err(Error::validation("geometry stage needs at least one view"));
    }
    if cloud.is_empty() {
        return Err(Error::validation("geometry stage needs a seed cloud"));
    }
    let n = cloud.len();
    let sh_len = cloud[0].sh.len();
    let extent = cloud_extent(&cloud);
    let opts = RasterizeOpts::default();

    let mut st_pos = AdamState::new(3 * n);
    let mut st_rot = AdamState::new(4 * n);
    let mut st_scale = AdamState::new(3 * n);
    let mut st_opacity = AdamState::new(n);
    let mut st_sh = AdamState::new(3 * sh_len * n);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut views = EpochSampler::new(dataset.len());

    for it in 1..=cfg.iterations {
        let v = views.next(&mut rng);
        let camera = &dataset.cameras[v];
        let target = &dataset.images[v];

        let render = rasterize(&cloud, camera, &opts)?;
        let photo = photometric_loss(&render.color, target)?;
        let up = RenderUpstream {
            color: Some(&photo.d_pred),
            ..Default::default()
        };
        let (_, grads) = rasterize_with_grads(&cloud, camera, &opts, &up)?;

        let decay = 0.01f32.powf((it - 1) as f32 / cfg.lr_position_decay_steps.max(1) as f32);
        let lr_pos = cfg.lr_position * extent * decay;

        let mut buf: Vec<f32> = cloud
            .iter()
            .flat_map(|g| [g.position.x, g.position.y, g.position.z])
            .collect();
        let gp: Vec<f32> = grads.position.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        adam_step(&mut buf, &gp, &mut st_pos, lr_pos);
        for (g, c) in cloud.iter_mut().zip(buf.chunks_exact(3)) {
            g.position = Vector3::new(c[0], c[1], c[2]);
        }

        let mut buf: Vec<f32> = cloud.iter().flat_map(|g| g.rotation).collect();
        let gr: Vec<f32> = grads.rotation.iter().flatten().copied().collect();
        adam_step(&mut buf, &gr, &mut st_rot, cfg.lr_rotation);
        for (g, c) in cloud.iter_mut().zip(buf.chunks_exact(4)) {
            g.rotation = [c[0], c[1], c[2], c[3]];
        }

        let mut buf: Vec<f32> = cloud
            .iter()
            .flat_map(|g| [g.log_scales.x, g.log_scales.y, g.log_scales.z])
            .collect();
        let gs: Vec<f32> = grads.log_scales.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        adam_step(&mut buf, &gs, &mut st_scale, cfg.lr_scale);
        for (g, c) in cloud.iter_mut().zip(buf.chunks_exact(3)) {
            g.log_scales = Vector3::new(
                c[0].clamp(LOG_SCALE_MIN, LOG_SCALE_MAX),
                c[1].clamp(LOG_SCALE_MIN, LOG_SCALE_MAX),
                c[2].clamp(LOG_SCALE_MIN, LOG_SCALE_MAX),
            );
        }

        let mut buf: Vec<f32> = cloud.iter().map(|g| g.opacity_logit).collect();
        adam_step(&mut buf, &grads.opacity_logit, &mut st_opacity, cfg.lr_opacity);
        for (g, &o) in cloud.iter_mut().zip(&buf) {
            g.opacity_logit = o;
        }

        let mut buf: Vec<f32> = cloud
            .iter()
            .flat_map(|g| g.sh.iter().flatten().copied())
            .collect();
        let gsh: Vec<f32> = grads
            .sh
            .iter()
            .flat_map(|per| per.iter().flatten().copied())
            .collect();
        adam_step(&mut buf, &gsh, &mut st_sh, cfg.lr_sh);
        for (g, chunk) in cloud.iter_mut().zip(buf.chunks_exact(3 * sh_len)) {
            for (coef, c) in g.sh.iter_mut().zip(chunk.chunks_exact(3)) {
                *coef = [c[0], c[1], c[2]];
            }
        }

        let record = IterRecord {
            iter: it,
            total: photo.total,
            parts: vec![
                ("l1", photo.l1),
                ("dssim", photo.dssim),
                ("psnr", psnr(&render.color, target)?),
            ],
        };
        on_iter(&record)?;
        if checkpoint_due(&cfg.checkpoints, it) {
            let ck = cfg.checkpoints.as_ref().expect("checked above");
            write_checkpoint(ck, 2, it, |dir| {
                crate::io::ply::save_gaussians(&dir.join("cloud.ply"), &cloud)
            })?;
        }
    }
    Ok(cloud)
}

pub struct StyleStageConfig {
    pub iterations: usize,
    pub lr: f32,
    pub content_weight: f32,
    pub style_weight: f32,
    pub pooled: bool,
    /// Align rendered features to encodings of the captured photos; when
    /// false, to encodings of the frozen geometry's own renders.
    pub photo_targets: bool,
    pub seed: u64,
    pub checkpoints: Option<StageCheckpoints>,
}

impl Default for StyleStageConfig {
    fn default() -> Self {
        StyleStageConfig {
            iterations: 3000,
            lr: 2.5e-3,
            content_weight: 1.0,
            style_weight: 1.0,
            pooled: true,
            photo_targets: true,
            seed: 0,
            checkpoints: None,
        }
    }
}

/// Stage 3: distill encoder features into the per-splat latents and the
/// expansion head. Each step renders the feature plane for a sampled
/// view, expands it, and minimizes alignment to that view's frozen
/// encoding plus the weighted content and style losses of the decoded
/// stylization against a sampled style. Geometry stays frozen; only
/// latent features and the head move.
pub fn train_style(
    dataset: &SceneDataset,
    mut cloud: Vec<FeatureGaussian>,
    encoder: &ConvNet,
    decoder: &ConvNet,
    mut head: DenseHead,
    styles: &[Grid],
    cfg: &StyleStageConfig,
    on_iter: &mut dyn FnMut(&IterRecord) -> Result<()>,
) -> Result<(Vec<FeatureGaussian>, DenseHead)> {
    if dataset.is_empty() || styles.is_empty() {
        return Err(Error::validation("style stage needs views and styles"));
    }
    if cloud.is_empty() {
        return Err(Error::validation("style stage needs a splat cloud"));
    }
    let fdim = cloud[0].feature_dim();
    if head.in_dim() != fdim {
        return Err(Error::shape(format!(
            "head expects {} feature channels, cloud carries {fdim}",
            head.in_dim()
        )));
    }
    if head.out_dim() != encoder.out_channels() {
        return Err(Error::shape(format!(
            "head expands to {} channels, encoder outputs {}",
            head.out_dim(),
            encoder.out_channels()
        )));
    }
    let opts = RasterizeOpts::default();
    let pools = encoder.blocks() - 1;

    let mut targets = Vec::with_capacity(dataset.len());
    for v in 0..dataset.len() {
        let img = if cfg.photo_targets {
            dataset.images[v].clone()
        } else {
            rasterize(&cloud, &dataset.cameras[v], &opts)?.color
        };
        let taps = encode_plain(encoder, &img, cfg.pooled)?;
        let deep = taps.last().expect("validated encoder has taps");
        let (norm, _) = ops::normalize(deep);
        targets.push(norm);
    }
    let codes: Vec<_> = styles
        .iter()
        .map(|s| style_code(encoder, s, cfg.pooled))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut views = EpochSampler::new(dataset.len());
    let mut style_order = EpochSampler::new(styles.len());
    let mut st_feat = AdamState::new(fdim * cloud.len());
    let mut st_weight = AdamState::new(head.weight.data().len());
    let mut st_bias = AdamState::new(head.bias.data().len());

    for it in 1..=cfg.iterations {
        let v = views.next(&mut rng);
        let si = style_order.next(&mut rng);
        let camera = &dataset.cameras[v];

        let render = rasterize(&cloud, camera, &opts)?;

        let mut tape = Tape::new();
        let feat = tape.leaf(render.feature);
        let head_nodes = (tape.leaf(head.weight.clone()), tape.leaf(head.bias.clone()));
        let expanded = run_head(&mut tape, head_nodes, feat, pools, cfg.pooled)?;
        let target = tape.constant(targets[v].clone());
        let l_align = tape.mse(expanded, target)?;

        let enc_nodes = insert_net(&mut tape, encoder, false);
        let dec_nodes = insert_net(&mut tape, decoder, false);
        let code = codes[si].last().expect("style code matches taps");
        let t = adain(&mut tape, expanded, code)?;
        let out = run_decoder(&mut tape, decoder, &dec_nodes, t, cfg.pooled)?;
        let taps2 = run_encoder(&mut tape, encoder, &enc_nodes, out, cfg.pooled)?;
        let deep2 = *taps2.last().expect("validated encoder has taps");
        let l_content = tape.mse(deep2, t)?;
        let l_style = style_stat_loss(&mut tape, &taps2, &codes[si])?;
        let wc = tape.scale(l_content, cfg.content_weight);
        let ws = tape.scale(l_style, cfg.style_weight);
        let partial = tape.add(l_align, wc)?;
        let loss = tape.add(partial, ws)?;
        tape.backward(loss)?;

        let d_feat = tape.grad(feat).expect("feature leaf has a gradient").clone();
        let up = RenderUpstream {
            feature: Some(&d_feat),
            ..Default::default()
        };
        let (_, grads) = rasterize_with_grads(&cloud, camera, &opts, &up)?;

        let mut buf: Vec<f32> = cloud.iter().flat_map(|g| g.feature.iter().copied()).collect();
        let gf: Vec<f32> = grads.feature.iter().flat_map(|per| per.iter().copied()).collect();
        adam_step(&mut buf, &gf, &mut st_feat, cfg.lr);
        for (g, chunk) in cloud.iter_mut().zip(buf.chunks_exact(fdim)) {
            g.feature.copy_from_slice(chunk);
        }

        let gw = tape.grad(head_nodes.0).expect("head weight has a gradient");
        adam_step(head.weight.data_mut(), gw.data(), &mut st_weight, cfg.lr);
        let gb = tape.grad(head_nodes.1).expect("head bias has a gradient");
        adam_step(head.bias.data_mut(), gb.data(), &mut st_bias, cfg.lr);

        let record = IterRecord {
            iter: it,
            total: tape.value(loss).data()[0],
            parts: vec![
                ("align", tape.value(l_align).data()[0]),
                ("content", tape.value(l_content).data()[0]),
                ("style", tape.value(l_style).data()[0]),
            ],
        };
        on_iter(&record)?;
        if checkpoint_due(&cfg.checkpoints, it) {
            let ck = cfg.checkpoints.as_ref().expect("checked above");
            write_checkpoint(ck, 3, it, |dir| {
                crate::io::ply::save_gaussians(&dir.join("cloud.ply"), &cloud)?;
                head.to_weights().save(&dir.join("style-head"))
            })?;
        }
    }
    Ok((cloud, head))
}
