//! Forward and backward kernels for the tape.
//!
//! Backward kernels accumulate into their output buffers so a node feeding
//! several consumers sums its gradients. Loop order is fixed everywhere;
//! parallelism only splits independent output elements, so results do not
//! depend on thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{ChannelStats, Grid, STD_EPS};

/// Reflected index for 1-pixel padding: -1 maps to 1, n maps to n-2.
/// Degenerate extents reflect onto the only row/column there is.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * n - 2 - i as usize
    } else {
        i as usize
    }
}

fn pad_reflect1(input: &Grid) -> Grid {
    let (c, h, w) = input.shape();
    let (ph, pw) = (h + 2, w + 2);
    let mut out = Grid::zeros(c, ph, pw);
    for ch in 0..c {
        let src = input.channel(ch);
        let dst = out.channel_mut(ch);
        for py in 0..ph {
            let sy = reflect(py as isize - 1, h);
            let row = &src[sy * w..(sy + 1) * w];
            let drow = &mut dst[py * pw..(py + 1) * pw];
            drow[0] = row[reflect(-1, w)];
            drow[1..=w].copy_from_slice(row);
            drow[w + 1] = row[reflect(w as isize, w)];
        }
    }
    out
}

/// Backward of [`pad_reflect1`]: fold each padded cell's gradient back onto
/// the source cell it mirrored.
fn fold_reflect1(d_padded: &Grid, h: usize, w: usize) -> Grid {
    let c = d_padded.channels();
    let pw = w + 2;
    let mut out = Grid::zeros(c, h, w);
    for ch in 0..c {
        let src = d_padded.channel(ch);
        let dst = out.channel_mut(ch);
        for py in 0..h + 2 {
            let sy = reflect(py as isize - 1, h);
            let row = &src[py * pw..(py + 1) * pw];
            let drow = &mut dst[sy * w..(sy + 1) * w];
            for px in 0..pw {
                drow[reflect(px as isize - 1, w)] += row[px];
            }
        }
    }
    out
}

fn check_conv_shapes(input: &Grid, kernel: &Grid, bias: &Grid) -> Result<(usize, usize)> {
    let (out_c, k_in, taps) = kernel.shape();
    if taps != 9 {
        return Err(Error::shape(format!(
            "conv2d kernel must have 9 taps per channel pair, got {taps}"
        )));
    }
    if k_in != input.channels() {
        return Err(Error::shape(format!(
            "conv2d kernel expects {} input channels, input has {}",
            k_in,
            input.channels()
        )));
    }
    if bias.shape() != (out_c, 1, 1) {
        return Err(Error::shape(format!(
            "conv2d bias shape {:?} does not match {} output channels",
            bias.shape(),
            out_c
        )));
    }
    Ok((out_c, k_in))
}

/// 3x3 convolution, stride 1, reflection padding, so spatial size is
/// preserved. Kernel is packed as (out, in, 9) with taps row-major.
pub fn conv2d(input: &Grid, kernel: &Grid, bias: &Grid) -> Result<Grid> {
    let (out_c, in_c) = check_conv_shapes(input, kernel, bias)?;
    let (_, h, w) = input.shape();
    let padded = pad_reflect1(input);
    let pw = w + 2;
    let mut out = Grid::zeros(out_c, h, w);
    let planes: Vec<&mut [f32]> = {
        let mut rest = out.data_mut();
        let mut v = Vec::with_capacity(out_c);
        for _ in 0..out_c {
            let (head, tail) = rest.split_at_mut(h * w);
            v.push(head);
            rest = tail;
        }
        v
    };
    planes.into_par_iter().enumerate().for_each(|(oc, plane)| {
        plane.fill(bias.data()[oc]);
        for ic in 0..in_c {
            let src = padded.channel(ic);
            for tap in 0..9 {
                let (dy, dx) = (tap / 3, tap % 3);
                let k = kernel.at(oc, ic, tap);
                if k == 0.0 {
                    continue;
                }
                for y in 0..h {
                    let row = &src[(y + dy) * pw + dx..(y + dy) * pw + dx + w];
                    let dst = &mut plane[y * w..(y + 1) * w];
                    for x in 0..w {
                        dst[x] += k * row[x];
                    }
                }
            }
        }
    });
    Ok(out)
}

pub struct ConvGrads {
    pub d_input: Option<Grid>,
    pub d_kernel: Option<Grid>,
    pub d_bias: Option<Grid>,
}

pub fn conv2d_backward(
    input: &Grid,
    kernel: &Grid,
    d_out: &Grid,
    want_input: bool,
    want_params: bool,
) -> ConvGrads {
    let (out_c, in_c, _) = kernel.shape();
    let (_, h, w) = input.shape();
    let pw = w + 2;
    let padded = pad_reflect1(input);

    let d_input = want_input.then(|| {
        let mut d_pad = Grid::zeros(in_c, h + 2, pw);
        let planes: Vec<&mut [f32]> = {
            let mut rest = d_pad.data_mut();
            let mut v = Vec::with_capacity(in_c);
            for _ in 0..in_c {
                let (head, tail) = rest.split_at_mut((h + 2) * pw);
                v.push(head);
                rest = tail;
            }
            v
        };
        planes.into_par_iter().enumerate().for_each(|(ic, plane)| {
            for oc in 0..out_c {
                let g = d_out.channel(oc);
                for tap in 0..9 {
                    let (dy, dx) = (tap / 3, tap % 3);
                    let k = kernel.at(oc, ic, tap);
                    if k == 0.0 {
                        continue;
                    }
                    for y in 0..h {
                        let grow = &g[y * w..(y + 1) * w];
                        let drow = &mut plane[(y + dy) * pw + dx..(y + dy) * pw + dx + w];
                        for x in 0..w {
                            drow[x] += k * grow[x];
                        }
                    }
                }
            }
        });
        fold_reflect1(&d_pad, h, w)
    });

    let (d_kernel, d_bias) = if want_params {
        let mut d_kernel = Grid::zeros(out_c, in_c, 9);
        let mut d_bias = Grid::zeros(out_c, 1, 1);
        let kplanes: Vec<(&mut [f32], &mut f32)> = {
            let mut krest = d_kernel.data_mut();
            let mut brest = d_bias.data_mut();
            let mut v = Vec::with_capacity(out_c);
            for _ in 0..out_c {
                let (kh, kt) = krest.split_at_mut(in_c * 9);
                let (bh, bt) = brest.split_at_mut(1);
                v.push((kh, &mut bh[0]));
                krest = kt;
                brest = bt;
            }
            v
        };
        kplanes
            .into_par_iter()
            .enumerate()
            .for_each(|(oc, (kplane, bias_slot))| {
                let g = d_out.channel(oc);
                let mut bsum = 0.0f64;
                for &v in g {
                    bsum += v as f64;
                }
                *bias_slot = bsum as f32;
                for ic in 0..in_c {
                    let src = padded.channel(ic);
                    for tap in 0..9 {
                        let (dy, dx) = (tap / 3, tap % 3);
                        let mut sum = 0.0f64;
                        for y in 0..h {
                            let grow = &g[y * w..(y + 1) * w];
                            let srow = &src[(y + dy) * pw + dx..(y + dy) * pw + dx + w];
                            for x in 0..w {
                                sum += grow[x] as f64 * srow[x] as f64;
                            }
                        }
                        kplane[ic * 9 + tap] = sum as f32;
                    }
                }
            });
        (Some(d_kernel), Some(d_bias))
    } else {
        (None, None)
    };

    ConvGrads {
        d_input,
        d_kernel,
        d_bias,
    }
}

pub fn relu(input: &Grid) -> Grid {
    let (c, h, w) = input.shape();
    let mut out = Grid::zeros(c, h, w);
    for (o, &v) in out.data_mut().iter_mut().zip(input.data()) {
        *o = v.max(0.0);
    }
    out
}

pub fn relu_backward(input: &Grid, d_out: &Grid, d_input: &mut Grid) {
    for ((di, &v), &g) in d_input
        .data_mut()
        .iter_mut()
        .zip(input.data())
        .zip(d_out.data())
    {
        if v > 0.0 {
            *di += g;
        }
    }
}

fn check_dense_shapes(input: &Grid, weights: &Grid, bias: &Grid) -> Result<(usize, usize)> {
    let (wc, out_dim, in_dim) = weights.shape();
    if wc != 1 {
        return Err(Error::shape(format!(
            "dense weights must be a single (out, in) matrix, got {} planes",
            wc
        )));
    }
    if in_dim != input.channels() {
        return Err(Error::shape(format!(
            "dense expects {} input channels, input has {}",
            in_dim,
            input.channels()
        )));
    }
    if bias.shape() != (out_dim, 1, 1) {
        return Err(Error::shape(format!(
            "dense bias shape {:?} does not match {} outputs",
            bias.shape(),
            out_dim
        )));
    }
    Ok((out_dim, in_dim))
}

/// Per-pixel linear map: every spatial position's channel vector is
/// multiplied by the same (out, in) matrix.
pub fn dense(input: &Grid, weights: &Grid, bias: &Grid) -> Result<Grid> {
    let (out_dim, in_dim) = check_dense_shapes(input, weights, bias)?;
    let (_, h, w) = input.shape();
    let plane = h * w;
    let mut out = Grid::zeros(out_dim, h, w);
    let planes: Vec<&mut [f32]> = {
        let mut rest = out.data_mut();
        let mut v = Vec::with_capacity(out_dim);
        for _ in 0..out_dim {
            let (head, tail) = rest.split_at_mut(plane);
            v.push(head);
            rest = tail;
        }
        v
    };
    planes.into_par_iter().enumerate().for_each(|(o, dst)| {
        dst.fill(bias.data()[o]);
        for i in 0..in_dim {
            let k = weights.data()[o * in_dim + i];
            if k == 0.0 {
                continue;
            }
            let src = input.channel(i);
            for p in 0..plane {
                dst[p] += k * src[p];
            }
        }
    });
    Ok(out)
}

pub struct DenseGrads {
    pub d_input: Option<Grid>,
    pub d_weights: Option<Grid>,
    pub d_bias: Option<Grid>,
}

pub fn dense_backward(
    input: &Grid,
    weights: &Grid,
    d_out: &Grid,
    want_input: bool,
    want_params: bool,
) -> DenseGrads {
    let (_, out_dim, in_dim) = weights.shape();
    let plane = input.plane();

    let d_input = want_input.then(|| {
        let mut d_in = Grid::zeros(in_dim, input.height(), input.width());
        for i in 0..in_dim {
            let dst = d_in.channel_mut(i);
            for o in 0..out_dim {
                let k = weights.data()[o * in_dim + i];
                if k == 0.0 {
                    continue;
                }
                let g = d_out.channel(o);
                for p in 0..plane {
                    dst[p] += k * g[p];
                }
            }
        }
        d_in
    });

    let (d_weights, d_bias) = if want_params {
        let mut d_w = Grid::zeros(1, out_dim, in_dim);
        let mut d_b = Grid::zeros(out_dim, 1, 1);
        for o in 0..out_dim {
            let g = d_out.channel(o);
            let mut bsum = 0.0f64;
            for &v in g {
                bsum += v as f64;
            }
            d_b.data_mut()[o] = bsum as f32;
            for i in 0..in_dim {
                let src = input.channel(i);
                let mut sum = 0.0f64;
                for p in 0..plane {
                    sum += g[p] as f64 * src[p] as f64;
                }
                d_w.data_mut()[o * in_dim + i] = sum as f32;
            }
        }
        (Some(d_w), Some(d_b))
    } else {
        (None, None)
    };

    DenseGrads {
        d_input,
        d_weights,
        d_bias,
    }
}

/// Per-channel whitening: (x - mean) / std, std clamped at [`STD_EPS`].
pub fn normalize(input: &Grid) -> (Grid, ChannelStats) {
    let stats = crate::grid::channel_stats(input);
    let (c, h, w) = input.shape();
    let mut out = Grid::zeros(c, h, w);
    for ch in 0..c {
        let (mu, sigma) = (stats.mean[ch], stats.std[ch]);
        let src = input.channel(ch);
        let dst = out.channel_mut(ch);
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - mu) / sigma;
        }
    }
    (out, stats)
}

/// Backward of [`normalize`], differentiating through the mean and the
/// standard deviation. Where the std clamp is active the std is a constant
/// and only the mean path contributes.
pub fn normalize_backward(output: &Grid, stats: &ChannelStats, d_out: &Grid, d_input: &mut Grid) {
    let (c, _, _) = output.shape();
    let n = output.plane() as f64;
    for ch in 0..c {
        let sigma = stats.std[ch];
        let clamped = sigma <= STD_EPS;
        let y = output.channel(ch);
        let g = d_out.channel(ch);
        let mut g_sum = 0.0f64;
        let mut gy_sum = 0.0f64;
        for (&gv, &yv) in g.iter().zip(y) {
            g_sum += gv as f64;
            gy_sum += gv as f64 * yv as f64;
        }
        let g_mean = (g_sum / n) as f32;
        let gy_mean = (gy_sum / n) as f32;
        let dst = d_input.channel_mut(ch);
        for ((d, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
            let centered = if clamped {
                gv - g_mean
            } else {
                gv - g_mean - yv * gy_mean
            };
            *d += centered / sigma;
        }
    }
}

fn check_code_shapes(input: &Grid, scale: &Grid, shift: &Grid) -> Result<()> {
    let c = input.channels();
    if scale.shape() != (c, 1, 1) || shift.shape() != (c, 1, 1) {
        return Err(Error::shape(format!(
            "per-channel affine expects scale/shift of shape ({c}, 1, 1), got {:?} and {:?}",
            scale.shape(),
            shift.shape()
        )));
    }
    Ok(())
}

/// out[c] = scale[c] * x[c] + shift[c].
pub fn affine_channel(input: &Grid, scale: &Grid, shift: &Grid) -> Result<Grid> {
    check_code_shapes(input, scale, shift)?;
    let (c, h, w) = input.shape();
    let mut out = Grid::zeros(c, h, w);
    for ch in 0..c {
        let (s, t) = (scale.data()[ch], shift.data()[ch]);
        for (d, &v) in out.channel_mut(ch).iter_mut().zip(input.channel(ch)) {
            *d = s * v + t;
        }
    }
    Ok(out)
}

pub fn affine_channel_backward(
    input: &Grid,
    scale: &Grid,
    d_out: &Grid,
    d_input: Option<&mut Grid>,
    d_scale: Option<&mut Grid>,
    d_shift: Option<&mut Grid>,
) {
    let c = input.channels();
    if let Some(d_in) = d_input {
        for ch in 0..c {
            let s = scale.data()[ch];
            for (d, &g) in d_in.channel_mut(ch).iter_mut().zip(d_out.channel(ch)) {
                *d += s * g;
            }
        }
    }
    if let Some(d_s) = d_scale {
        for ch in 0..c {
            let mut sum = 0.0f64;
            for (&g, &v) in d_out.channel(ch).iter().zip(input.channel(ch)) {
                sum += g as f64 * v as f64;
            }
            d_s.data_mut()[ch] += sum as f32;
        }
    }
    if let Some(d_t) = d_shift {
        for ch in 0..c {
            let mut sum = 0.0f64;
            for &g in d_out.channel(ch) {
                sum += g as f64;
            }
            d_t.data_mut()[ch] += sum as f32;
        }
    }
}

/// 2x2 average pooling. Spatial dims must be even; odd sizes have no
/// destination for the trailing row/column.
pub fn avg_pool2(input: &Grid) -> Result<Grid> {
    let (c, h, w) = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "avg_pool2 requires even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Grid::zeros(c, oh, ow);
    for ch in 0..c {
        let src = input.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..oh {
            let r0 = &src[(2 * y) * w..(2 * y + 1) * w];
            let r1 = &src[(2 * y + 1) * w..(2 * y + 2) * w];
            let drow = &mut dst[y * ow..(y + 1) * ow];
            for x in 0..ow {
                drow[x] = 0.25 * (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]);
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2_backward(d_out: &Grid, d_input: &mut Grid) {
    let (c, oh, ow) = d_out.shape();
    let w = d_input.width();
    for ch in 0..c {
        let g = d_out.channel(ch);
        let dst = d_input.channel_mut(ch);
        for y in 0..oh {
            for x in 0..ow {
                let share = 0.25 * g[y * ow + x];
                dst[(2 * y) * w + 2 * x] += share;
                dst[(2 * y) * w + 2 * x + 1] += share;
                dst[(2 * y + 1) * w + 2 * x] += share;
                dst[(2 * y + 1) * w + 2 * x + 1] += share;
            }
        }
    }
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(input: &Grid) -> Grid {
    let (c, h, w) = input.shape();
    let (oh, ow) = (h * 2, w * 2);
    let mut out = Grid::zeros(c, oh, ow);
    for ch in 0..c {
        let src = input.channel(ch);
        let dst = out.channel_mut(ch);
        for y in 0..oh {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut dst[y * ow..(y + 1) * ow];
            for x in 0..ow {
                drow[x] = srow[x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(d_out: &Grid, d_input: &mut Grid) {
    let (c, oh, ow) = d_out.shape();
    let w = d_input.width();
    for ch in 0..c {
        let g = d_out.channel(ch);
        let dst = d_input.channel_mut(ch);
        for y in 0..oh {
            let grow = &g[y * ow..(y + 1) * ow];
            let drow = &mut dst[(y / 2) * w..(y / 2 + 1) * w];
            for x in 0..ow {
                drow[x / 2] += grow[x];
            }
        }
    }
}

/// Per-channel means as a (C, 1, 1) grid.
pub fn channel_mean(input: &Grid) -> Grid {
    let stats = crate::grid::channel_stats(input);
    Grid::from_vec(input.channels(), 1, 1, stats.mean).expect("stats length matches channels")
}

pub fn channel_mean_backward(d_out: &Grid, d_input: &mut Grid) {
    let inv_n = 1.0 / d_input.plane() as f32;
    for ch in 0..d_input.channels() {
        let g = d_out.data()[ch] * inv_n;
        for d in d_input.channel_mut(ch) {
            *d += g;
        }
    }
}

/// Per-channel standard deviations as a (C, 1, 1) grid, clamped at
/// [`STD_EPS`] like every std in this crate.
pub fn channel_std(input: &Grid) -> (Grid, ChannelStats) {
    let stats = crate::grid::channel_stats(input);
    let g = Grid::from_vec(input.channels(), 1, 1, stats.std.clone())
        .expect("stats length matches channels");
    (g, stats)
}

pub fn channel_std_backward(
    input: &Grid,
    stats: &ChannelStats,
    d_out: &Grid,
    d_input: &mut Grid,
) {
    let n = input.plane() as f32;
    for ch in 0..input.channels() {
        let sigma = stats.std[ch];
        if sigma <= STD_EPS {
            // Clamp active: std is constant here.
            continue;
        }
        let mu = stats.mean[ch];
        let g = d_out.data()[ch] / (n * sigma);
        for (d, &v) in d_input.channel_mut(ch).iter_mut().zip(input.channel(ch)) {
            *d += g * (v - mu);
        }
    }
}

/// Sum (or mean, when `mean` is set) of squared differences, accumulated in
/// f64. Returns a scalar.
pub fn sq_err(a: &Grid, b: &Grid, mean: bool) -> Result<f32> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "squared-error operands differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut sum = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x as f64 - y as f64;
        sum += d * d;
    }
    if mean {
        sum /= a.len() as f64;
    }
    Ok(sum as f32)
}

pub fn sq_err_backward(
    a: &Grid,
    b: &Grid,
    mean: bool,
    upstream: f32,
    d_a: Option<&mut Grid>,
    d_b: Option<&mut Grid>,
) {
    let k = if mean {
        2.0 * upstream / a.len() as f32
    } else {
        2.0 * upstream
    };
    if let Some(da) = d_a {
        for ((d, &x), &y) in da.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
            *d += k * (x - y);
        }
    }
    if let Some(db) = d_b {
        for ((d, &x), &y) in db.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
            *d -= k * (x - y);
        }
    }
}
