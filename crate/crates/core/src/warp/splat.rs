//! Forward softmax splatting and multi-frame blending.

use serde::{Deserialize, Serialize};

use super::{FlowField, WarpError};
use crate::scene::{DepthMap, ImageBuffer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplatParams {
    /// Minimum bilinear kernel mass for a target pixel to count as covered.
    pub eps_cov: f64,
    /// Sharpness applied to the importance logits.
    pub beta: f64,
}

impl Default for SplatParams {
    fn default() -> Self {
        Self {
            eps_cov: 1e-4,
            beta: 10.0,
        }
    }
}

/// A forward-warped image.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub image: ImageBuffer,
    /// True where the pixel received enough kernel mass.
    pub mask: Vec<bool>,
    /// Accumulated importance-weighted splat denominator.
    pub weight: Vec<f64>,
    /// Accumulated bilinear kernel mass (importance-free).
    pub coverage: Vec<f64>,
}

impl WarpResult {
    pub fn covered_fraction(&self) -> f64 {
        self.mask.iter().filter(|m| **m).count() as f64 / self.mask.len().max(1) as f64
    }
}

/// Mass bookkeeping of one splat, in max-shifted importance units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SplatStats {
    /// `Σ e^{β(Z_p − max Z)}` over valid source pixels.
    pub source_mass: f64,
    /// Sum of the per-pixel denominators inside the target image.
    pub in_bounds_mass: f64,
    /// Mass whose kernel taps fell outside the target image.
    pub out_of_bounds_mass: f64,
}

/// Forward-splats `image` along `flow`; see [`softmax_splat_with_stats`].
pub fn softmax_splat(
    image: &ImageBuffer,
    flow: &FlowField,
    importance: &[f64],
    params: SplatParams,
) -> Result<WarpResult, WarpError> {
    softmax_splat_with_stats(image, flow, importance, params).map(|(w, _)| w)
}

/// Softmax splatting.
///
/// Every valid source pixel `p` lands at `q = p + flow(p)` and spreads
/// `e^{β Z_p}` over the four surrounding pixels with bilinear weights. The
/// output colour is the ratio of accumulated weighted colour to accumulated
/// weight. Logits are shifted by their maximum before exponentiation.
/// Accumulation runs sequentially in row-major source order.
pub fn softmax_splat_with_stats(
    image: &ImageBuffer,
    flow: &FlowField,
    importance: &[f64],
    params: SplatParams,
) -> Result<(WarpResult, SplatStats), WarpError> {
    let (w, h, c) = (image.width, image.height, image.channels);
    if flow.width != w || flow.height != h || importance.len() != w * h {
        return Err(WarpError::ShapeMismatch(format!(
            "image {w}x{h}, flow {}x{}, importance length {}",
            flow.width,
            flow.height,
            importance.len()
        )));
    }
    if !(params.beta.is_finite() && params.eps_cov >= 0.0) {
        return Err(WarpError::InvalidParams(format!("{params:?}")));
    }
    let max_z = (0..w * h)
        .filter(|&i| flow.valid[i])
        .map(|i| params.beta * importance[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut num = vec![0.0f64; w * h * c];
    let mut den = vec![0.0f64; w * h];
    let mut cov = vec![0.0f64; w * h];
    let mut stats = SplatStats::default();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !flow.valid[i] {
                continue;
            }
            let mass = (params.beta * importance[i] - max_z).exp();
            stats.source_mass += mass;
            let qx = x as f64 + flow.flow[i][0] as f64;
            let qy = y as f64 + flow.flow[i][1] as f64;
            let (x0, y0) = (qx.floor(), qy.floor());
            let (fx, fy) = (qx - x0, qy - y0);
            let taps = [
                (x0, y0, (1.0 - fx) * (1.0 - fy)),
                (x0 + 1.0, y0, fx * (1.0 - fy)),
                (x0, y0 + 1.0, (1.0 - fx) * fy),
                (x0 + 1.0, y0 + 1.0, fx * fy),
            ];
            let color = image.pixel(x, y);
            for (tx, ty, b) in taps {
                if b == 0.0 {
                    continue;
                }
                if tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                    stats.out_of_bounds_mass += mass * b;
                    continue;
                }
                let t = ty as usize * w + tx as usize;
                den[t] += mass * b;
                cov[t] += b;
                for (n, v) in num[t * c..(t + 1) * c].iter_mut().zip(color) {
                    *n += mass * b * *v as f64;
                }
            }
        }
    }
    let mut out = ImageBuffer::new(w, h, c);
    let mut mask = vec![false; w * h];
    for t in 0..w * h {
        if cov[t] > params.eps_cov && den[t] > 0.0 {
            mask[t] = true;
            for (o, n) in out.data[t * c..(t + 1) * c].iter_mut().zip(&num[t * c..(t + 1) * c]) {
                *o = (n / den[t]).clamp(0.0, 1.0) as f32;
            }
        }
    }
    stats.in_bounds_mass = den.iter().sum();
    Ok((
        WarpResult {
            image: out,
            mask,
            weight: den,
            coverage: cov,
        },
        stats,
    ))
}

/// Negative depth rescaled to `[−1, 0]`: the nearest valid pixel gets 0, the
/// farthest −1. Constant depth gives 0 everywhere; invalid pixels get −1.
pub fn importance_from_depth(depth: &DepthMap) -> Vec<f64> {
    let Some((lo, hi)) = depth.valid_range() else {
        return vec![-1.0; depth.data.len()];
    };
    let range = (hi - lo) as f64;
    depth
        .data
        .iter()
        .zip(&depth.valid)
        .map(|(d, ok)| match (*ok, range > 0.0) {
            (false, _) => -1.0,
            (true, false) => 0.0,
            (true, true) => -((*d - lo) as f64) / range,
        })
        .collect()
}

/// Blends warps from several history frames.
///
/// At each pixel, warps whose mask is set get weight `exp(−γ (age − 1))`,
/// normalized over those warps. The output mask is the union of the input
/// masks; `weight` and `coverage` sum over contributing warps.
pub fn blend_history(warps: &[(WarpResult, usize)], gamma: f64) -> Result<WarpResult, WarpError> {
    let Some((first, _)) = warps.first() else {
        return Err(WarpError::EmptyList);
    };
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(WarpError::InvalidParams(format!(
            "gamma must be non-negative, got {gamma}"
        )));
    }
    let (w, h, c) = (first.image.width, first.image.height, first.image.channels);
    for (warp, age) in warps {
        if !warp.image.same_shape(&first.image) {
            return Err(WarpError::ShapeMismatch(format!(
                "warp is {}x{}x{}, expected {w}x{h}x{c}",
                warp.image.width, warp.image.height, warp.image.channels
            )));
        }
        if *age < 1 {
            return Err(WarpError::InvalidAge(*age));
        }
    }
    if warps.len() == 1 {
        return Ok(first.clone());
    }
    let decay: Vec<f64> = warps
        .iter()
        .map(|(_, age)| (-gamma * (*age as f64 - 1.0)).exp())
        .collect();
    let mut out = WarpResult {
        image: ImageBuffer::new(w, h, c),
        mask: vec![false; w * h],
        weight: vec![0.0; w * h],
        coverage: vec![0.0; w * h],
    };
    let mut acc = vec![0.0f64; c];
    for p in 0..w * h {
        let mut total = 0.0;
        acc.iter_mut().for_each(|a| *a = 0.0);
        for ((warp, _), d) in warps.iter().zip(&decay) {
            if !warp.mask[p] {
                continue;
            }
            total += d;
            out.weight[p] += warp.weight[p];
            out.coverage[p] += warp.coverage[p];
            for (a, v) in acc.iter_mut().zip(&warp.image.data[p * c..(p + 1) * c]) {
                *a += d * *v as f64;
            }
        }
        if total > 0.0 {
            out.mask[p] = true;
            for (o, a) in out.image.data[p * c..(p + 1) * c].iter_mut().zip(&acc) {
                *o = (a / total) as f32;
            }
        }
    }
    Ok(out)
}
