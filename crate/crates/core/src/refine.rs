//! Deterministic 2x upscaler for equirectangular images. Horizontal sampling
//! wraps around the seam; vertical sampling clamps at the poles.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::pano::Panorama;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Bicubic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UpscaleConfig {
    pub factor: usize,
    pub interpolation: Interpolation,
}

impl Default for UpscaleConfig {
    fn default() -> Self {
        UpscaleConfig { factor: 2, interpolation: Interpolation::Bilinear }
    }
}

/// Keys cubic convolution kernel with a = -0.5.
fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (1.5 * x - 2.5) * x * x + 1.0
    } else if x < 2.0 {
        ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0
    } else {
        0.0
    }
}

/// Source taps `(index, weight)` for output position `o` of a 2x upsampling
/// with half-pixel alignment; indices wrap when `wrap`, else clamp.
fn taps(o: usize, len: usize, kind: Interpolation, wrap: bool) -> Vec<(usize, f64)> {
    let src = (o as f64 + 0.5) / 2.0 - 0.5;
    let base = src.floor() as i64;
    let frac = src - base as f64;
    let fix = |i: i64| -> usize {
        if wrap {
            i.rem_euclid(len as i64) as usize
        } else {
            i.clamp(0, len as i64 - 1) as usize
        }
    };
    match kind {
        Interpolation::Bilinear => vec![(fix(base), 1.0 - frac), (fix(base + 1), frac)],
        Interpolation::Bicubic => (-1..=2).map(|d| (fix(base + d), cubic(frac - d as f64))).collect(),
    }
}

/// Upscales every channel by 2 and clamps the result to `[lo, hi]`.
pub fn upscale(x: &Tensor, config: &UpscaleConfig, lo: f32, hi: f32) -> Result<Tensor> {
    if config.factor != 2 {
        return invalid(format!("only factor 2 is supported, got {}", config.factor));
    }
    let (h, w) = (x.h, x.w);
    let (oh, ow) = (2 * h, 2 * w);
    let col_taps: Vec<_> = (0..ow).map(|o| taps(o, w, config.interpolation, true)).collect();
    let row_taps: Vec<_> = (0..oh).map(|o| taps(o, h, config.interpolation, false)).collect();
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut wide = vec![0.0f64; h * ow];
    for (src, dst) in x.data.chunks_exact(h * w).zip(out.data.chunks_exact_mut(oh * ow)) {
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (ox, t) in col_taps.iter().enumerate() {
                wide[y * ow + ox] = t.iter().map(|&(i, wt)| wt * row[i] as f64).sum();
            }
        }
        for (oy, t) in row_taps.iter().enumerate() {
            for ox in 0..ow {
                let v: f64 = t.iter().map(|&(i, wt)| wt * wide[i * ow + ox]).sum();
                dst[oy * ow + ox] = (v as f32).clamp(lo, hi);
            }
        }
    }
    Ok(out)
}

/// Upscales RGB (clamped to `[-1, 1]`) and depth (clamped to `>= 0`).
pub fn upscale_panorama(pano: &Panorama, config: &UpscaleConfig) -> Result<Panorama> {
    Panorama::new(upscale(&pano.rgb, config, -1.0, 1.0)?, upscale(&pano.depth, config, 0.0, f32::MAX)?)
}
