//! Photometric losses between rendered and reference images, with analytic
//! gradients in the prediction for the rasterizer backward to consume.

use crate::error::{Error, Result};
use crate::grid::Grid;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f32 = 1.5;
/// Stability constants for unit dynamic range: (0.01)^2 and (0.03)^2.
const SSIM_C1: f32 = 1e-4;
const SSIM_C2: f32 = 9e-4;

pub const L1_WEIGHT: f32 = 0.8;
pub const DSSIM_WEIGHT: f32 = 0.2;

/// Normalized blur window.
fn window_taps() -> [f32; SSIM_WINDOW] {
    let mut g = [0f32; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as isize;
    let denom = 2.0 * SSIM_SIGMA * SSIM_SIGMA;
    for (i, slot) in g.iter_mut().enumerate() {
        let d = (i as isize - half) as f32;
        *slot = (-d * d / denom).exp();
    }
    let sum: f32 = g.iter().sum();
    for slot in &mut g {
        *slot /= sum;
    }
    g
}

fn check_pair(pred: &Grid, target: &Grid) -> Result<()> {
    if !pred.same_shape(target) {
        return Err(Error::shape(format!(
            "loss operands differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Separable valid-region blur: (C, H, W) -> (C, H-10, W-10).
fn blur_valid(input: &Grid) -> Grid {
    let g = window_taps();
    let (c, h, w) = input.shape();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut tmp = Grid::zeros(c, h, ow);
    for ch in 0..c {
        let src = input.channel(ch);
        let dst = tmp.channel_mut(ch);
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            let drow = &mut dst[y * ow..(y + 1) * ow];
            for x in 0..ow {
                let mut s = 0.0;
                for (i, &gi) in g.iter().enumerate() {
                    s += gi * row[x + i];
                }
                drow[x] = s;
            }
        }
    }
    let mut out = Grid::zeros(c, oh, ow);
    for ch in 0..c {
        let src = tmp.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..oh {
            let drow = &mut dst[y * ow..(y + 1) * ow];
            for (j, &gj) in g.iter().enumerate() {
                let row = &src[(y + j) * ow..(y + j + 1) * ow];
                for x in 0..ow {
                    drow[x] += gj * row[x];
                }
            }
        }
    }
    out
}

/// Adjoint of [`blur_valid`]: scatter window-space values back to pixels.
fn blur_adjoint(d: &Grid, h: usize, w: usize) -> Grid {
    let g = window_taps();
    let (c, oh, ow) = d.shape();
    let mut tmp = Grid::zeros(c, h, ow);
    for ch in 0..c {
        let src = d.channel(ch);
        let dst = tmp.channel_mut(ch);
        for y in 0..oh {
            let row = &src[y * ow..(y + 1) * ow];
            for (j, &gj) in g.iter().enumerate() {
                let drow = &mut dst[(y + j) * ow..(y + j + 1) * ow];
                for x in 0..ow {
                    drow[x] += gj * row[x];
                }
            }
        }
    }
    let mut out = Grid::zeros(c, h, w);
    for ch in 0..c {
        let src = tmp.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..h {
            let row = &src[y * ow..(y + 1) * ow];
            let drow = &mut dst[y * w..(y + 1) * w];
            for x in 0..ow {
                let v = row[x];
                if v == 0.0 {
                    continue;
                }
                for (i, &gi) in g.iter().enumerate() {
                    drow[x + i] += gi * v;
                }
            }
        }
    }
    out
}

/// Mean absolute error and its gradient in `pred`. The subgradient at
/// exact ties is zero.
pub fn l1_loss(pred: &Grid, target: &Grid) -> Result<(f32, Grid)> {
    check_pair(pred, target)?;
    let n = pred.len() as f32;
    let mut grad = Grid::zeros(pred.channels(), pred.height(), pred.width());
    let mut sum = 0.0f64;
    for ((&p, &t), d) in pred
        .data()
        .iter()
        .zip(target.data())
        .zip(grad.data_mut())
    {
        let diff = p - t;
        sum += diff.abs() as f64;
        *d = if diff > 0.0 {
            1.0 / n
        } else if diff < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok(((sum / n as f64) as f32, grad))
}

/// Structural dissimilarity: 1 minus mean SSIM over valid windows, with the
/// gradient in `pred`. Windows are Gaussian-weighted and fully inside the
/// image, so borders thinner than the window contribute nothing.
pub fn ssim_loss(pred: &Grid, target: &Grid) -> Result<(f32, Grid)> {
    check_pair(pred, target)?;
    let (c, h, w) = pred.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "structural loss needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }

    let square = |a: &Grid| {
        let mut s = a.clone();
        for v in s.data_mut() {
            *v *= *v;
        }
        s
    };
    let product = |a: &Grid, b: &Grid| {
        let mut s = a.clone();
        for (v, &bv) in s.data_mut().iter_mut().zip(b.data()) {
            *v *= bv;
        }
        s
    };

    let mu_x = blur_valid(pred);
    let mu_y = blur_valid(target);
    let m_xx = blur_valid(&square(pred));
    let m_yy = blur_valid(&square(target));
    let m_xy = blur_valid(&product(pred, target));

    let (oc, oh, ow) = mu_x.shape();
    let m = (oc * oh * ow) as f64;
    let mut c1 = Grid::zeros(oc, oh, ow);
    let mut c2 = Grid::zeros(oc, oh, ow);
    let mut c3 = Grid::zeros(oc, oh, ow);
    let mut mean_s = 0.0f64;
    for i in 0..oc * oh * ow {
        let (mx, my) = (mu_x.data()[i], mu_y.data()[i]);
        let var_x = m_xx.data()[i] - mx * mx;
        let var_y = m_yy.data()[i] - my * my;
        let cov = m_xy.data()[i] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * cov + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = var_x + var_y + SSIM_C2;
        let s = (a1 * a2) / (b1 * b2);
        mean_s += s as f64;
        let inv_bb = 1.0 / (b1 * b2);
        c2.data_mut()[i] = 2.0 * a1 * inv_bb;
        c3.data_mut()[i] = -2.0 * s / b2;
        c1.data_mut()[i] =
            2.0 * my * (a2 - a1) * inv_bb - 2.0 * s * mx * (1.0 / b1 - 1.0 / b2);
    }
    mean_s /= m;

    let g1 = blur_adjoint(&c1, h, w);
    let g2 = blur_adjoint(&c2, h, w);
    let g3 = blur_adjoint(&c3, h, w);
    let mut grad = Grid::zeros(c, h, w);
    let scale = -1.0 / m as f32;
    for i in 0..c * h * w {
        grad.data_mut()[i] = scale
            * (g1.data()[i] + target.data()[i] * g2.data()[i] + pred.data()[i] * g3.data()[i]);
    }
    Ok(((1.0 - mean_s) as f32, grad))
}

/// Blended photometric objective and its gradient in `pred`.
pub struct PhotoLoss {
    pub total: f32,
    pub l1: f32,
    pub dssim: f32,
    pub d_pred: Grid,
}

pub fn photometric_loss(pred: &Grid, target: &Grid) -> Result<PhotoLoss> {
    let (l1, g1) = l1_loss(pred, target)?;
    let (dssim, g2) = ssim_loss(pred, target)?;
    let mut d_pred = g1;
    for (d, &s) in d_pred.data_mut().iter_mut().zip(g2.data()) {
        *d = L1_WEIGHT * *d + DSSIM_WEIGHT * s;
    }
    Ok(PhotoLoss {
        total: L1_WEIGHT * l1 + DSSIM_WEIGHT * dssim,
        l1,
        dssim,
        d_pred,
    })
}

/// Peak signal-to-noise ratio for unit dynamic range; infinite for
/// identical images.
pub fn psnr(pred: &Grid, target: &Grid) -> Result<f32> {
    check_pair(pred, target)?;
    let mut sum = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p as f64 - t as f64;
        sum += d * d;
    }
    let mse = sum / pred.len() as f64;
    if mse == 0.0 {
        return Ok(f32::INFINITY);
    }
    Ok((-10.0 * mse.log10()) as f32)
}
