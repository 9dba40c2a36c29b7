//! Front-to-back alpha compositing over depth-sorted splats, plus the
//! matching gradient pass.
//!
//! Color, latent feature and depth blend with the same per-splat weight
//! w = T * alpha, so a splat whose feature equals its color produces a
//! bitwise identical feature image. Blending stops once transmittance
//! falls below `transmittance_eps`; the output alpha is the weight sum.
//!
//! The gradient pass walks each pixel twice: the first pass records the
//! blended totals and where blending stopped, the second recovers every
//! intermediate transmittance front to back and needs no divisions by
//! weights. Rows are processed in fixed-size bands and band results are
//! merged in band order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::raster::project::Projected;
use crate::raster::RasterizeOpts;

const BAND_ROWS: usize = 64;

/// Per-splat gradient slots ahead of the feature block:
/// u, v, conic (a, b, c), alpha base, color rgb, depth.
pub(crate) const G_FIXED: usize = 10;

#[inline]
fn weight_at(p: &Projected, px: f32, py: f32, cutoff: f32) -> Option<f32> {
    let dx = px - p.mean2d[0];
    let dy = py - p.mean2d[1];
    let power = -0.5 * (p.conic[0] * dx * dx + p.conic[2] * dy * dy) - p.conic[1] * dx * dy;
    // power > 0 is inverse-covariance round-off; the weight must not
    // exceed one.
    if power < cutoff || power > 0.0 {
        None
    } else {
        Some(power.exp())
    }
}

/// Indices into `order` whose footprint covers row `y`.
fn row_list(order: &[Projected], y: usize, out: &mut Vec<u32>) {
    out.clear();
    for (i, p) in order.iter().enumerate() {
        if y >= p.y_range.0 && y < p.y_range.1 {
            out.push(i as u32);
        }
    }
}

/// Forward-composite rows [y0, y1) into `rows_out`, one row of
/// `(3 + fdim + 2) * width` floats per image row, channel-major.
/// Channel order: color, feature, depth, alpha.
pub(crate) fn forward_rows(
    y0: usize,
    y1: usize,
    width: usize,
    order: &[Projected],
    feats: &[&[f32]],
    fdim: usize,
    opts: &RasterizeOpts,
    rows_out: &mut [f32],
) {
    let n_blend = 3 + fdim + 1;
    let n_out = n_blend + 1;
    let mut ids = Vec::new();
    for y in y0..y1 {
        let out = &mut rows_out[(y - y0) * n_out * width..(y - y0 + 1) * n_out * width];
        row_list(order, y, &mut ids);
        let py = y as f32 + 0.5;
        for x in 0..width {
            let px = x as f32 + 0.5;
            let mut t = 1.0f32;
            for &i in &ids {
                let p = &order[i as usize];
                if x < p.x_range.0 || x >= p.x_range.1 {
                    continue;
                }
                let Some(g) = weight_at(p, px, py, opts.exponent_cutoff) else {
                    continue;
                };
                let alpha = (p.alpha_base * g).min(opts.alpha_clamp);
                let w = t * alpha;
                out[x] += w * p.color[0];
                out[width + x] += w * p.color[1];
                out[2 * width + x] += w * p.color[2];
                let f = feats[i as usize];
                for (k, fv) in f.iter().enumerate() {
                    out[(3 + k) * width + x] += w * fv;
                }
                out[(3 + fdim) * width + x] += w * p.depth;
                out[(3 + fdim + 1) * width + x] += w;
                t *= 1.0 - alpha;
                if t < opts.transmittance_eps {
                    break;
                }
            }
        }
    }
}

/// Upstream gradient planes; a `None` plane contributes nothing.
pub(crate) struct UpstreamPlanes<'a> {
    pub color: Option<[&'a [f32]; 3]>,
    pub feature: Option<Vec<&'a [f32]>>,
    pub depth: Option<&'a [f32]>,
    pub alpha: Option<&'a [f32]>,
}

/// Forward rows [y0, y1) and accumulate per-splat gradients into `gacc`
/// (`order.len() * (G_FIXED + fdim)` floats). The forward result written to
/// `rows_out` is bitwise identical to [`forward_rows`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_rows(
    y0: usize,
    y1: usize,
    width: usize,
    order: &[Projected],
    feats: &[&[f32]],
    fdim: usize,
    opts: &RasterizeOpts,
    up: &UpstreamPlanes,
    rows_out: &mut [f32],
    gacc: &mut [f32],
) {
    let n_blend = 3 + fdim + 1;
    let n_out = n_blend + 1;
    let gs = G_FIXED + fdim;
    let mut ids = Vec::new();
    let mut tot = vec![0.0f32; n_out];
    let mut ple = vec![0.0f32; n_out];
    let mut u = vec![0.0f32; n_blend];

    for y in y0..y1 {
        let out = &mut rows_out[(y - y0) * n_out * width..(y - y0 + 1) * n_out * width];
        row_list(order, y, &mut ids);
        let py = y as f32 + 0.5;
        for x in 0..width {
            let px = x as f32 + 0.5;
            let pix = y * width + x;

            // First pass: totals and the stop point, accumulated in the
            // exact channel order of forward_rows.
            tot.iter_mut().for_each(|v| *v = 0.0);
            let mut t = 1.0f32;
            let mut stop = ids.len();
            for (k, &i) in ids.iter().enumerate() {
                let p = &order[i as usize];
                if x < p.x_range.0 || x >= p.x_range.1 {
                    continue;
                }
                let Some(g) = weight_at(p, px, py, opts.exponent_cutoff) else {
                    continue;
                };
                let alpha = (p.alpha_base * g).min(opts.alpha_clamp);
                let w = t * alpha;
                tot[0] += w * p.color[0];
                tot[1] += w * p.color[1];
                tot[2] += w * p.color[2];
                let f = feats[i as usize];
                for (c, fv) in f.iter().enumerate() {
                    tot[3 + c] += w * fv;
                }
                tot[3 + fdim] += w * p.depth;
                tot[n_blend] += w;
                t *= 1.0 - alpha;
                if t < opts.transmittance_eps {
                    stop = k + 1;
                    break;
                }
            }
            for ch in 0..n_out {
                out[ch * width + x] = tot[ch];
            }

            // Upstream values for this pixel.
            let mut any = false;
            let mut u_a = 0.0f32;
            match &up.color {
                Some(planes) => {
                    for ch in 0..3 {
                        u[ch] = planes[ch][pix];
                        any |= u[ch] != 0.0;
                    }
                }
                None => u[..3].iter_mut().for_each(|v| *v = 0.0),
            }
            match &up.feature {
                Some(planes) => {
                    for (c, plane) in planes.iter().enumerate() {
                        u[3 + c] = plane[pix];
                        any |= u[3 + c] != 0.0;
                    }
                }
                None => u[3..3 + fdim].iter_mut().for_each(|v| *v = 0.0),
            }
            u[3 + fdim] = up.depth.map_or(0.0, |pl| pl[pix]);
            if let Some(pl) = up.alpha {
                u_a = pl[pix];
            }
            any |= u[3 + fdim] != 0.0 || u_a != 0.0;
            if !any {
                continue;
            }

            // Second pass: rebuild transmittances front to back. Suffix
            // sums come from totals minus a running prefix; at the stop
            // splat they cancel exactly because both passes add in the
            // same order.
            ple.iter_mut().for_each(|v| *v = 0.0);
            let mut t = 1.0f32;
            for &i in &ids[..stop] {
                let p = &order[i as usize];
                if x < p.x_range.0 || x >= p.x_range.1 {
                    continue;
                }
                let Some(g) = weight_at(p, px, py, opts.exponent_cutoff) else {
                    continue;
                };
                let alpha = (p.alpha_base * g).min(opts.alpha_clamp);
                let w = t * alpha;
                let base = i as usize * gs;
                let f = feats[i as usize];

                gacc[base + 6] += u[0] * w;
                gacc[base + 7] += u[1] * w;
                gacc[base + 8] += u[2] * w;
                for c in 0..fdim {
                    gacc[base + G_FIXED + c] += u[3 + c] * w;
                }
                gacc[base + 9] += u[3 + fdim] * w;

                ple[0] += w * p.color[0];
                ple[1] += w * p.color[1];
                ple[2] += w * p.color[2];
                for (c, fv) in f.iter().enumerate() {
                    ple[3 + c] += w * fv;
                }
                ple[3 + fdim] += w * p.depth;
                ple[n_blend] += w;

                // d(loss)/d(alpha): the splat's own contribution enters
                // with T, everything behind it loses a (1 - alpha) factor.
                let inv_rest = 1.0 / (1.0 - alpha);
                let mut da = u_a * (t - (tot[n_blend] - ple[n_blend]) * inv_rest);
                da += u[0] * (t * p.color[0] - (tot[0] - ple[0]) * inv_rest);
                da += u[1] * (t * p.color[1] - (tot[1] - ple[1]) * inv_rest);
                da += u[2] * (t * p.color[2] - (tot[2] - ple[2]) * inv_rest);
                for (c, fv) in f.iter().enumerate() {
                    da += u[3 + c] * (t * fv - (tot[3 + c] - ple[3 + c]) * inv_rest);
                }
                da += u[3 + fdim] * (t * p.depth - (tot[3 + fdim] - ple[3 + fdim]) * inv_rest);

                // A clamped alpha is flat in its inputs.
                if p.alpha_base * g < opts.alpha_clamp {
                    gacc[base + 5] += da * g;
                    let dpow = da * p.alpha_base * g;
                    let dx = px - p.mean2d[0];
                    let dy = py - p.mean2d[1];
                    gacc[base + 2] -= dpow * 0.5 * dx * dx;
                    gacc[base + 3] -= dpow * dx * dy;
                    gacc[base + 4] -= dpow * 0.5 * dy * dy;
                    gacc[base] += dpow * (p.conic[0] * dx + p.conic[1] * dy);
                    gacc[base + 1] += dpow * (p.conic[1] * dx + p.conic[2] * dy);
                }
                t *= 1.0 - alpha;
            }
        }
    }
}

/// Composite the full image in parallel row bands; outputs are ordered
/// (color, feature, depth, alpha).
pub(crate) fn composite_forward(
    order: &[Projected],
    feats: &[&[f32]],
    fdim: usize,
    width: usize,
    height: usize,
    opts: &RasterizeOpts,
) -> Vec<Vec<f32>> {
    let n_out = 3 + fdim + 2;
    let bands: Vec<(usize, usize)> = (0..height)
        .step_by(BAND_ROWS)
        .map(|y0| (y0, (y0 + BAND_ROWS).min(height)))
        .collect();
    bands
        .into_par_iter()
        .map(|(y0, y1)| {
            let mut rows = vec![0.0f32; (y1 - y0) * n_out * width];
            forward_rows(y0, y1, width, order, feats, fdim, opts, &mut rows);
            rows
        })
        .collect()
}

/// Forward plus per-splat raw gradients; band-local accumulators merge in
/// band order so the result is independent of the thread count.
pub(crate) fn composite_backward(
    order: &[Projected],
    feats: &[&[f32]],
    fdim: usize,
    width: usize,
    height: usize,
    opts: &RasterizeOpts,
    up: &UpstreamPlanes,
) -> (Vec<Vec<f32>>, Vec<f32>) {
    let n_out = 3 + fdim + 2;
    let gs = G_FIXED + fdim;
    let bands: Vec<(usize, usize)> = (0..height)
        .step_by(BAND_ROWS)
        .map(|y0| (y0, (y0 + BAND_ROWS).min(height)))
        .collect();
    let band_results: Vec<(Vec<f32>, Vec<f32>)> = bands
        .into_par_iter()
        .map(|(y0, y1)| {
            let mut rows = vec![0.0f32; (y1 - y0) * n_out * width];
            let mut gacc = vec![0.0f32; order.len() * gs];
            backward_rows(y0, y1, width, order, feats, fdim, opts, up, &mut rows, &mut gacc);
            (rows, gacc)
        })
        .collect();

    let mut gacc = vec![0.0f32; order.len() * gs];
    let mut row_chunks = Vec::with_capacity(band_results.len());
    for (rows, band_gacc) in band_results {
        for (dst, src) in gacc.iter_mut().zip(&band_gacc) {
            *dst += src;
        }
        row_chunks.push(rows);
    }
    (row_chunks, gacc)
}
