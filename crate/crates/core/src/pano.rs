//! Equirectangular panorama types, wraparound geometry and mask generators.
//!
//! Columns are azimuth and wrap around; rows are elevation and do not.
//! Masks use `1 = visible`, `0 = missing`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Spatial downsampling factor of the autoencoders.
pub const LATENT_FACTOR: usize = 4;

/// An RGB-D equirectangular frame. RGB lives in `[-1, 1]`, depth in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct Panorama {
    pub rgb: Tensor,
    pub depth: Tensor,
}

impl Panorama {
    pub fn new(rgb: Tensor, depth: Tensor) -> Result<Self> {
        if rgb.n != 1 || rgb.c != 3 {
            return invalid("panorama rgb must be a single 3-channel image");
        }
        if depth.n != 1 || depth.c != 1 || depth.h != rgb.h || depth.w != rgb.w {
            return invalid("panorama depth must be a single channel on the rgb grid");
        }
        check_equirect(rgb.h, rgb.w)?;
        if rgb.data.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return invalid("rgb values must lie in [-1, 1]");
        }
        if depth.data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return invalid("depth values must be finite and non-negative");
        }
        Ok(Panorama { rgb, depth })
    }

    pub fn height(&self) -> usize {
        self.rgb.h
    }

    pub fn width(&self) -> usize {
        self.rgb.w
    }

    /// Rotates the camera yaw by `columns` pixel columns.
    pub fn shifted(&self, columns: i64) -> Panorama {
        Panorama { rgb: circular_shift(&self.rgb, columns), depth: circular_shift(&self.depth, columns) }
    }
}

/// Checks the 2:1 aspect and that the height is a multiple of the latent factor.
pub fn check_equirect(h: usize, w: usize) -> Result<()> {
    if h == 0 || w != 2 * h {
        return invalid(format!("equirectangular grid must be H x 2H, got {h}x{w}"));
    }
    if h % LATENT_FACTOR != 0 {
        return invalid(format!("height {h} is not divisible by {LATENT_FACTOR}"));
    }
    Ok(())
}

/// Rolls every row right by `columns`: output column `j` is input column `(j - columns) mod W`.
pub fn circular_shift(t: &Tensor, columns: i64) -> Tensor {
    let w = t.w;
    if w == 0 {
        return t.clone();
    }
    let k = columns.rem_euclid(w as i64) as usize;
    if k == 0 {
        return t.clone();
    }
    let mut out = Vec::with_capacity(t.len());
    for row in t.data.chunks_exact(w) {
        out.extend_from_slice(&row[w - k..]);
        out.extend_from_slice(&row[..w - k]);
    }
    Tensor { n: t.n, c: t.c, h: t.h, w, data: out }
}

/// `round(width * angle / 360)` with round-half-up, reduced modulo `width`.
pub fn degrees_to_columns(angle_deg: f64, width: i64) -> Result<i64> {
    if width <= 0 {
        return invalid(format!("width must be positive, got {width}"));
    }
    let cols = (width as f64 * angle_deg / 360.0 + 0.5).floor() as i64;
    Ok(cols.rem_euclid(width))
}

/// A binary visibility grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn all_visible(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![1; h * w] }
    }

    pub fn all_masked(h: usize, w: usize) -> Self {
        Mask { h, w, data: vec![0; h * w] }
    }

    /// Builds a mask from arbitrary bytes; any nonzero value counts as visible.
    pub fn from_values(h: usize, w: usize, values: &[u8]) -> Result<Self> {
        if values.len() != h * w {
            return invalid(format!("mask data length {} != {h}x{w}", values.len()));
        }
        Ok(Mask { h, w, data: values.iter().map(|&v| u8::from(v != 0)).collect() })
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, visible: bool) {
        self.data[y * self.w + x] = u8::from(visible);
    }

    pub fn values(&self) -> &[u8] {
        &self.data
    }

    pub fn visible_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// The mask as a `1 x 1 x H x W` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            n: 1,
            c: 1,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f32::from(v)).collect(),
        }
    }

    pub fn shifted(&self, columns: i64) -> Mask {
        let w = self.w;
        let k = columns.rem_euclid(w.max(1) as i64) as usize;
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(w) {
            data.extend_from_slice(&row[w - k..]);
            data.extend_from_slice(&row[..w - k]);
        }
        Mask { h: self.h, w, data }
    }

    /// Writes an 8-bit grayscale PNG, 0 = masked and 255 = visible.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.w as u32, self.h as u32, bytes)
            .ok_or_else(|| Error::InvalidArgument("mask buffer size mismatch".into()))?;
        img.save(path)?;
        Ok(())
    }

    /// Reads a grayscale PNG; values ≥ 128 are visible.
    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::NotFound(path.display().to_string()));
        }
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| u8::from(v >= 128)).collect();
        Ok(Mask { h: h as usize, w: w as usize, data })
    }
}

/// Fraction of visible entries.
pub fn mask_coverage(mask: &Mask) -> f64 {
    if mask.data.is_empty() {
        return 0.0;
    }
    mask.visible_count() as f64 / mask.data.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DownsamplePolicy {
    /// A latent cell is visible only when its whole pixel block is.
    #[default]
    AllVisible,
    AnyVisible,
}

/// Reduces a pixel mask to latent resolution, one cell per `factor x factor` block.
pub fn downsample_mask(mask: &Mask, factor: usize, policy: DownsamplePolicy) -> Result<Mask> {
    if factor == 0 || mask.h % factor != 0 || mask.w % factor != 0 {
        return invalid(format!("mask {}x{} is not divisible by factor {factor}", mask.h, mask.w));
    }
    let (lh, lw) = (mask.h / factor, mask.w / factor);
    let mut out = Mask::all_masked(lh, lw);
    for ly in 0..lh {
        for lx in 0..lw {
            let mut all = true;
            let mut any = false;
            for y in ly * factor..(ly + 1) * factor {
                for x in lx * factor..(lx + 1) * factor {
                    let v = mask.get(y, x);
                    all &= v;
                    any |= v;
                }
            }
            let visible = match policy {
                DownsamplePolicy::AllVisible => all,
                DownsamplePolicy::AnyVisible => any,
            };
            out.set(ly, lx, visible);
        }
    }
    Ok(out)
}

/// Where an NFoV view points. Longitude 0° is column 0; elevation 0° is the horizon row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewCenter {
    pub longitude_deg: f64,
    pub elevation_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskKind {
    /// One visible view; a random center is drawn when `center` is absent.
    Nfov {
        fov_h_deg: f64,
        fov_v_deg: f64,
        #[serde(default)]
        center: Option<ViewCenter>,
    },
    /// Union of `views` random NFoV views with field of view drawn from the ranges.
    Camera { views: usize, fov_h_range_deg: (f64, f64), fov_v_range_deg: (f64, f64) },
    /// Only the top (ceiling) and bottom (floor) bands are visible.
    Layout { ceiling_frac: f64, floor_frac: f64 },
    /// Fully visible except for `count` random rectangles, sizes as fractions of H and W.
    Box { count_range: (usize, usize), size_frac_range: (f64, f64) },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    #[serde(flatten)]
    pub kind: MaskKind,
    #[serde(default)]
    pub seed: u64,
}

/// Random view centers stay within this many degrees of the horizon.
const MAX_RANDOM_ELEVATION_DEG: f64 = 30.0;

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        let in_range = |lo: f64, hi: f64, what: &str, max: f64| -> Result<()> {
            if !(lo > 0.0 && lo <= hi && hi <= max) {
                return invalid(format!("{what} range ({lo}, {hi}) must satisfy 0 < lo <= hi <= {max}"));
            }
            Ok(())
        };
        match &self.kind {
            MaskKind::Nfov { fov_h_deg, fov_v_deg, .. } => {
                if !(*fov_h_deg > 0.0) || !(*fov_v_deg > 0.0) || *fov_v_deg > 180.0 {
                    return invalid("nfov fields of view must be positive, vertical at most 180°");
                }
            }
            MaskKind::Camera { fov_h_range_deg, fov_v_range_deg, .. } => {
                in_range(fov_h_range_deg.0, fov_h_range_deg.1, "camera fov_h", 360.0)?;
                in_range(fov_v_range_deg.0, fov_v_range_deg.1, "camera fov_v", 180.0)?;
            }
            MaskKind::Layout { ceiling_frac, floor_frac } => {
                let ok = |f: f64| (0.0..=1.0).contains(&f);
                if !ok(*ceiling_frac) || !ok(*floor_frac) || ceiling_frac + floor_frac > 1.0 {
                    return invalid("layout band fractions must be in [0,1] and sum to at most 1");
                }
            }
            MaskKind::Box { count_range, size_frac_range } => {
                if count_range.0 > count_range.1 {
                    return invalid("box count range is reversed");
                }
                in_range(size_frac_range.0, size_frac_range.1, "box size", 1.0)?;
            }
        }
        Ok(())
    }
}

/// Generates the mask described by `spec` on an `h x w` grid. Deterministic in `spec.seed`.
pub fn gen_mask(spec: &MaskSpec, h: usize, w: usize) -> Result<Mask> {
    spec.validate()?;
    if h == 0 || w == 0 {
        return invalid("mask grid must be non-empty");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mask = match &spec.kind {
        MaskKind::Nfov { fov_h_deg, fov_v_deg, center } => {
            let center = center.unwrap_or_else(|| random_center(&mut rng));
            let mut m = Mask::all_masked(h, w);
            paint_view(&mut m, *fov_h_deg, *fov_v_deg, center);
            m
        }
        MaskKind::Camera { views, fov_h_range_deg, fov_v_range_deg } => {
            let mut m = Mask::all_masked(h, w);
            for _ in 0..*views {
                let fh = sample_range(&mut rng, *fov_h_range_deg);
                let fv = sample_range(&mut rng, *fov_v_range_deg);
                let center = random_center(&mut rng);
                paint_view(&mut m, fh, fv, center);
            }
            m
        }
        MaskKind::Layout { ceiling_frac, floor_frac } => {
            let top = round_half_up(ceiling_frac * h as f64).min(h);
            let bottom = round_half_up(floor_frac * h as f64).min(h - top);
            let mut m = Mask::all_masked(h, w);
            for y in (0..top).chain(h - bottom..h) {
                for x in 0..w {
                    m.set(y, x, true);
                }
            }
            m
        }
        MaskKind::Box { count_range, size_frac_range } => {
            let mut m = Mask::all_visible(h, w);
            let count = rng.random_range(count_range.0..=count_range.1);
            for _ in 0..count {
                let bh = round_half_up(sample_range(&mut rng, *size_frac_range) * h as f64).clamp(1, h);
                let bw = round_half_up(sample_range(&mut rng, *size_frac_range) * w as f64).clamp(1, w);
                let y0 = rng.random_range(0..=h - bh);
                let x0 = rng.random_range(0..w);
                for y in y0..y0 + bh {
                    for dx in 0..bw {
                        m.set(y, (x0 + dx) % w, false);
                    }
                }
            }
            m
        }
    };
    Ok(mask)
}

/// Left half visible, right half masked: the two-end consistency probe.
pub fn half_visible_mask(h: usize, w: usize) -> Mask {
    let mut m = Mask::all_masked(h, w);
    for y in 0..h {
        for x in 0..w / 2 {
            m.set(y, x, true);
        }
    }
    m
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn random_center(rng: &mut ChaCha8Rng) -> ViewCenter {
    ViewCenter {
        longitude_deg: rng.random_range(0.0..360.0),
        elevation_deg: rng.random_range(-MAX_RANDOM_ELEVATION_DEG..=MAX_RANDOM_ELEVATION_DEG),
    }
}

/// Marks the axis-aligned equirectangular footprint of a view as visible,
/// wrapping horizontally and clamping vertically.
fn paint_view(mask: &mut Mask, fov_h_deg: f64, fov_v_deg: f64, center: ViewCenter) {
    let (h, w) = (mask.h, mask.w);
    let cols = round_half_up(w as f64 * fov_h_deg / 360.0).min(w);
    let rows = round_half_up(h as f64 * fov_v_deg / 180.0).min(h);
    if cols == 0 || rows == 0 {
        return;
    }
    let center_col = w as f64 * center.longitude_deg / 360.0;
    let x0 = (center_col - cols as f64 / 2.0 + 0.5).floor() as i64;
    let center_row = h as f64 * (90.0 - center.elevation_deg) / 180.0;
    let y0 = ((center_row - rows as f64 / 2.0 + 0.5).floor().max(0.0) as usize).min(h - rows);
    for y in y0..y0 + rows {
        for dx in 0..cols as i64 {
            mask.set(y, (x0 + dx).rem_euclid(w as i64) as usize, true);
        }
    }
}
