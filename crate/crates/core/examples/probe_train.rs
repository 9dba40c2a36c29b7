use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use splatstyle_core::field::FeatureGaussian;
use splatstyle_core::raster::{rasterize, RasterizeOpts};
use splatstyle_core::stylizer::{ConvNet, DenseHead};
use splatstyle_core::train::losses::psnr;
use splatstyle_core::train::stages::*;
use splatstyle_core::train::synth::{synth_scene, synth_style_image, SynthConfig};

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "geom".into());
    if mode == "geom" {
        probe_geometry();
    } else if mode == "gradnorm" {
        probe_gradnorm();
    } else {
        probe_style(&mode);
    }
}

fn probe_gradnorm() {
    use splatstyle_core::autodiff::Tape;
    use splatstyle_core::stylizer::{
        adain, encode_plain, insert_net, run_decoder, run_encoder, run_head, style_code,
        style_stat_loss,
    };
    let scene = synth_scene(&SynthConfig {
        views: 4,
        width: 32,
        height: 32,
        gaussians: 150,
        focal: 1.5,
        feature_dim: 64,
        seed: 6,
        ..Default::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let enc = ConvNet::encoder_tiny(&mut rng);
    let dec = ConvNet::decoder_mirror(&mut rng, &enc).unwrap();
    let mut rng2 = ChaCha8Rng::seed_from_u64(19);
    let mut head = DenseHead::new(&mut rng2, 64, enc.out_channels());
    // Nudge features off zero so the state resembles mid-training.
    let mut cloud = scene.cloud.clone();
    let mut rng3 = ChaCha8Rng::seed_from_u64(23);
    for g in &mut cloud {
        for f in &mut g.feature {
            *f = rand::Rng::gen_range(&mut rng3, -0.3f32..0.3);
        }
    }
    for v in &mut head.weight.data_mut().iter_mut() {
        *v *= 1.0;
    }
    let style = synth_style_image(500, 32, 32);
    let code = style_code(&enc, &style, true).unwrap();
    let taps_photo = encode_plain(&enc, &scene.dataset.images[0], true).unwrap();
    let deep = taps_photo.last().unwrap();
    let stats = splatstyle_core::channel_stats(deep);
    let mut target = deep.clone();
    for c in 0..target.channels() {
        let (mu, sd) = (stats.mean[c], stats.std[c]);
        for v in target.channel_mut(c) {
            *v = (*v - mu) / sd;
        }
    }

    let render = rasterize(&cloud, &scene.dataset.cameras[0], &RasterizeOpts::default()).unwrap();
    let norm = |g: &splatstyle_core::Grid| -> f32 {
        g.data().iter().map(|v| (v * v) as f64).sum::<f64>().sqrt() as f32
    };
    for which in ["align", "content", "style"] {
        let mut tape = Tape::new();
        let feat = tape.leaf(render.feature.clone());
        let hn = (tape.leaf(head.weight.clone()), tape.leaf(head.bias.clone()));
        let expanded = run_head(&mut tape, hn, feat, 3, true).unwrap();
        let tgt = tape.constant(target.clone());
        let l_align = tape.mse(expanded, tgt).unwrap();
        let en = insert_net(&mut tape, &enc, false);
        let dn = insert_net(&mut tape, &dec, false);
        let t = adain(&mut tape, expanded, code.last().unwrap()).unwrap();
        let out = run_decoder(&mut tape, &dec, &dn, t, true).unwrap();
        let taps2 = run_encoder(&mut tape, &enc, &en, out, true).unwrap();
        let deep2 = *taps2.last().unwrap();
        let l_content = tape.mse(deep2, t).unwrap();
        let l_style = style_stat_loss(&mut tape, &taps2, &code).unwrap();
        let root = match which {
            "align" => l_align,
            "content" => l_content,
            _ => l_style,
        };
        tape.backward(root).unwrap();
        let gf = tape.grad(feat).map(norm).unwrap_or(0.0);
        let gw = tape.grad(hn.0).map(norm).unwrap_or(0.0);
        eprintln!(
            "{which}: value {:.4} |dF| {:.3e} |dW| {:.3e}",
            tape.value(root).data()[0],
            gf,
            gw
        );
    }
}

fn probe_geometry() {
    let scene = synth_scene(&SynthConfig {
        views: 5,
        width: 48,
        height: 36,
        gaussians: 50,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    let init = init_cloud_from_points(&scene.points, 1, 8).unwrap();
    let opts = RasterizeOpts::default();
    let mean_psnr = |cloud: &[FeatureGaussian]| -> f32 {
        let vals: Vec<f32> = scene
            .dataset
            .cameras
            .iter()
            .zip(&scene.dataset.images)
            .map(|(cam, img)| {
                let r = rasterize(cloud, cam, &opts).unwrap();
                psnr(&r.color, img).unwrap()
            })
            .collect();
        vals.iter().sum::<f32>() / vals.len() as f32
    };
    eprintln!("init psnr {:.2}", mean_psnr(&init));
    let iters: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(2000);
    let cfg = GeometryStageConfig {
        iterations: iters,
        seed: 9,
        ..Default::default()
    };
    let cloud = pretrain_geometry(&scene.dataset, init, &cfg, &mut |r| {
        if r.iter % 100 == 0 {
            let p = r.parts.iter().find(|(n, _)| *n == "psnr").unwrap().1;
            eprintln!("iter {} train psnr {:.2}", r.iter, p);
        }
        Ok(())
    })
    .unwrap();
    eprintln!("final psnr {:.2}", mean_psnr(&cloud));
}

fn probe_style(mode: &str) {
    let scene = synth_scene(&SynthConfig {
        views: 4,
        width: 32,
        height: 32,
        gaussians: 150,
        focal: 1.5,
        feature_dim: 64,
        seed: 6,
        ..Default::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let enc = ConvNet::encoder_tiny(&mut rng);
    let mut dec = ConvNet::decoder_mirror(&mut rng, &enc).unwrap();
    let styles: Vec<_> = (500..502).map(|s| synth_style_image(s, 32, 32)).collect();

    if mode == "style-pre" {
        let photos: Vec<_> = scene.dataset.images.clone();
        let cfg = DecoderStageConfig {
            iterations: 300,
            lr: 2e-3,
            seed: 5,
            ..Default::default()
        };
        let mut last = 0.0;
        dec = pretrain_decoder(&enc, dec, &photos, &styles, &cfg, &mut |r| {
            last = r.total;
            Ok(())
        })
        .unwrap();
        eprintln!("decoder pretrain final loss {last:.4}");
    }

    let mut rng2 = ChaCha8Rng::seed_from_u64(19);
    let fdim = scene.cloud[0].feature_dim();
    let head = DenseHead::new(&mut rng2, fdim, enc.out_channels());
    let (cw, sw) = match mode {
        "style-alignonly" => (0.0, 0.0),
        "style-content" => (1.0, 0.0),
        "style-style" => (0.0, 1.0),
        _ => (1.0, 1.0),
    };
    let lr: f32 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(2.5e-3);
    let iters: usize = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(600);
    let cfg = StyleStageConfig {
        iterations: iters,
        lr,
        content_weight: cw,
        style_weight: sw,
        seed: 23,
        ..Default::default()
    };
    let mut aligns = Vec::new();
    train_style(
        &scene.dataset,
        scene.cloud.clone(),
        &enc,
        &dec,
        head,
        &styles,
        &cfg,
        &mut |r| {
            aligns.push(r.parts[0].1);
            if r.iter % 50 == 0 {
                let ma: f32 = aligns[aligns.len() - 50..].iter().sum::<f32>() / 50.0;
                eprintln!(
                    "iter {} align ma50 {:.4} content {:.4} style {:.4}",
                    r.iter,
                    ma,
                    r.parts[1].1,
                    r.parts[2].1
                );
            }
            Ok(())
        },
    )
    .unwrap();
}
