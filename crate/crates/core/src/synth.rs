//! Procedural RGB-D rooms rendered as equirectangular panoramas, plus
//! on-disk dataset persistence.
//!
//! Rooms are axis-aligned boxes `[0, sx] x [0, sy] x [0, sz]` (z up) with
//! optional box-shaped furniture. Every pixel casts one ray from the camera;
//! depth is the Euclidean hit distance and color is the flat surface color
//! shaded by `1 / (1 + 0.1 * depth)`.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::pano::{check_equirect, Panorama};
use crate::tensor::Tensor;

pub type Rgb = [f32; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FurnitureBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub color: Rgb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    /// Room extent along x, y and z (height), meters.
    pub size: [f64; 3],
    pub camera: [f64; 3],
    /// Camera yaw in radians; world azimuth of a pixel is its panorama azimuth minus yaw.
    #[serde(default)]
    pub yaw: f64,
    /// Walls at x = 0, x = sx, y = 0, y = sy.
    pub wall_colors: [Rgb; 4],
    pub floor_color: Rgb,
    pub ceiling_color: Rgb,
    #[serde(default)]
    pub furniture: Vec<FurnitureBox>,
    #[serde(default)]
    pub seed: u64,
}

/// Nearest surface along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub color: Rgb,
}

impl RoomSpec {
    /// An empty room with neutral colors and the camera at `camera`.
    pub fn empty(size: [f64; 3], camera: [f64; 3]) -> Self {
        RoomSpec {
            size,
            camera,
            yaw: 0.0,
            wall_colors: [[0.8, 0.7, 0.6]; 4],
            floor_color: [0.4, 0.3, 0.2],
            ceiling_color: [0.95, 0.95, 0.95],
            furniture: Vec::new(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return invalid("room dimensions must be positive");
        }
        let inside = (0..3).all(|i| self.camera[i] > 0.0 && self.camera[i] < self.size[i]);
        if !inside {
            return invalid(format!("camera {:?} is not strictly inside the room {:?}", self.camera, self.size));
        }
        for f in &self.furniture {
            let ok = (0..3).all(|i| 0.0 <= f.min[i] && f.min[i] < f.max[i] && f.max[i] <= self.size[i]);
            if !ok {
                return invalid("furniture box must be non-empty and inside the room");
            }
            if (0..3).all(|i| f.min[i] <= self.camera[i] && self.camera[i] <= f.max[i]) {
                return invalid("camera is inside a furniture box");
            }
        }
        Ok(())
    }

    /// Casts a ray from the camera along the unit direction `dir`.
    pub fn trace(&self, dir: [f64; 3]) -> Hit {
        let c = self.camera;
        // Exit point of the room interior: the closest wall plane ahead on any axis.
        let mut best = Hit { distance: f64::INFINITY, color: [0.0; 3] };
        for axis in 0..3 {
            let d = dir[axis];
            if d.abs() < 1e-12 {
                continue;
            }
            let (t, color) = if d > 0.0 {
                ((self.size[axis] - c[axis]) / d, self.surface_color(axis, true))
            } else {
                (-c[axis] / d, self.surface_color(axis, false))
            };
            if t < best.distance {
                best = Hit { distance: t, color };
            }
        }
        for f in &self.furniture {
            if let Some(t) = ray_box(c, dir, f.min, f.max) {
                if t < best.distance {
                    best = Hit { distance: t, color: f.color };
                }
            }
        }
        best
    }

    fn surface_color(&self, axis: usize, positive: bool) -> Rgb {
        match (axis, positive) {
            (0, false) => self.wall_colors[0],
            (0, true) => self.wall_colors[1],
            (1, false) => self.wall_colors[2],
            (1, true) => self.wall_colors[3],
            (_, false) => self.floor_color,
            (_, true) => self.ceiling_color,
        }
    }

    pub fn diagonal(&self) -> f64 {
        self.size.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// Entry distance of a ray into an axis-aligned box, if it hits in front of the origin.
fn ray_box(origin: [f64; 3], dir: [f64; 3], min: [f64; 3], max: [f64; 3]) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for i in 0..3 {
        if dir[i].abs() < 1e-12 {
            if origin[i] < min[i] || origin[i] > max[i] {
                return None;
            }
            continue;
        }
        let a = (min[i] - origin[i]) / dir[i];
        let b = (max[i] - origin[i]) / dir[i];
        t_near = t_near.max(a.min(b));
        t_far = t_far.min(a.max(b));
    }
    (t_near <= t_far && t_near > 0.0).then_some(t_near)
}

/// Panorama azimuth of column `j` (pixel center), in `[-π, π)`.
pub fn column_azimuth(j: usize, width: usize) -> f64 {
    -PI + 2.0 * PI * (j as f64 + 0.5) / width as f64
}

/// Elevation of row `i` (pixel center); row 0 looks up.
pub fn row_elevation(i: usize, height: usize) -> f64 {
    PI / 2.0 - PI * (i as f64 + 0.5) / height as f64
}

pub fn direction(azimuth: f64, elevation: f64) -> [f64; 3] {
    let (se, ce) = elevation.sin_cos();
    let (sa, ca) = azimuth.sin_cos();
    [ce * ca, ce * sa, se]
}

/// Shading applied to flat surface colors.
pub fn shade(color: f32, depth: f64) -> f32 {
    (color as f64 / (1.0 + 0.1 * depth)) as f32
}

/// Renders an `height x 2*height` RGB-D panorama of the room.
pub fn render_room(spec: &RoomSpec, height: usize) -> Result<Panorama> {
    spec.validate()?;
    let width = 2 * height;
    check_equirect(height, width)?;
    let mut rgb = Tensor::zeros(1, 3, height, width);
    let mut depth = Tensor::zeros(1, 1, height, width);
    let plane = height * width;
    for i in 0..height {
        let elevation = row_elevation(i, height);
        for j in 0..width {
            let azimuth = column_azimuth(j, width) - spec.yaw;
            let hit = spec.trace(direction(azimuth, elevation));
            let p = i * width + j;
            depth.data[p] = hit.distance as f32;
            for ch in 0..3 {
                let v = shade(hit.color[ch], hit.distance);
                rgb.data[ch * plane + p] = (2.0 * v - 1.0).clamp(-1.0, 1.0);
            }
        }
    }
    Panorama::new(rgb, depth)
}

/// Draws a random furnished room. Rooms are 3-6 m wide, the camera sits near
/// the center at eye height, and 1-4 boxes stand against the walls.
pub fn random_room(seed: u64) -> RoomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = [rng.random_range(3.0..6.0), rng.random_range(3.0..6.0), rng.random_range(2.5..3.2)];
    let camera = [
        size[0] / 2.0 + rng.random_range(-0.3..0.3),
        size[1] / 2.0 + rng.random_range(-0.3..0.3),
        rng.random_range(1.2..1.7),
    ];
    let base: Rgb = [rng.random_range(0.5..0.95), rng.random_range(0.5..0.95), rng.random_range(0.5..0.95)];
    let mut wall_colors = [base; 4];
    for wall in wall_colors.iter_mut() {
        for ch in wall.iter_mut() {
            *ch = (*ch + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0);
        }
    }
    let floor_color = [rng.random_range(0.25..0.6), rng.random_range(0.15..0.45), rng.random_range(0.1..0.3)];
    let grey = rng.random_range(0.85..1.0);
    let ceiling_color = [grey, grey, grey];
    let count = rng.random_range(1..=4);
    let mut furniture = Vec::with_capacity(count);
    for _ in 0..count {
        let wall = rng.random_range(0..4);
        let along = rng.random_range(0.5..1.5f64);
        let across = rng.random_range(0.4..1.0f64);
        let tall = rng.random_range(0.4..2.0f64).min(size[2] - 0.1);
        let (ax, cx) = if wall < 2 { (1, 0) } else { (0, 1) };
        let mut min = [0.0; 3];
        let mut max = [0.0; 3];
        let start = rng.random_range(0.0..(size[ax] - along).max(0.01));
        min[ax] = start;
        max[ax] = (start + along).min(size[ax]);
        if wall % 2 == 0 {
            min[cx] = 0.0;
            max[cx] = across;
        } else {
            min[cx] = size[cx] - across;
            max[cx] = size[cx];
        }
        min[2] = 0.0;
        max[2] = tall;
        let color = [rng.random_range(0.05..1.0), rng.random_range(0.05..1.0), rng.random_range(0.05..1.0)];
        furniture.push(FurnitureBox { min, max, color });
    }
    RoomSpec { size, camera, yaw: 0.0, wall_colors, floor_color, ceiling_color, furniture, seed }
}

/// Zeroes exactly `round(fraction * n)` uniformly chosen depth entries.
pub fn sparsify_depth(depth: &Tensor, fraction: f64, seed: u64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&fraction) {
        return invalid(format!("sparsity fraction {fraction} outside [0, 1]"));
    }
    let n = depth.len();
    let k = ((fraction * n as f64) + 0.5).floor() as usize;
    let mut out = depth.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, n, k.min(n)) {
        out.data[i] = 0.0;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    pub split: Split,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub split_ratios: [f64; 3],
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    /// Assigns `n` items to splits by a seeded permutation. Counts are
    /// `round(r_train * n)`, `round(r_val * n)` and the remainder.
    pub fn new(n: usize, height: usize, seed: u64, split_ratios: [f64; 3]) -> Result<Self> {
        if n == 0 {
            return invalid("dataset must contain at least one item");
        }
        check_equirect(height, 2 * height)?;
        if split_ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (split_ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return invalid(format!("split ratios {split_ratios:?} must be in [0,1] and sum to 1"));
        }
        let n_train = ((split_ratios[0] * n as f64) + 0.5).floor() as usize;
        let n_val = (((split_ratios[1] * n as f64) + 0.5).floor() as usize).min(n - n_train.min(n));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let order = index::sample(&mut rng, n, n).into_vec();
        let mut splits = vec![Split::Test; n];
        for (rank, &i) in order.iter().enumerate() {
            splits[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        let items = (0..n)
            .map(|i| ManifestItem { id: format!("{i:05}"), split: splits[i], seed: rng.random() })
            .collect();
        Ok(DatasetManifest { version: 1, height, width: 2 * height, seed, split_ratios, items })
    }

    pub fn ids(&self, split: Split) -> Vec<&ManifestItem> {
        self.items.iter().filter(|it| it.split == split).collect()
    }
}

/// Panoramas for every manifest item, in manifest order.
pub fn render_dataset(manifest: &DatasetManifest) -> Result<Vec<Panorama>> {
    manifest.items.iter().map(|it| render_room(&random_room(it.seed), manifest.height)).collect()
}

fn item_paths(dir: &Path, item: &ManifestItem) -> (PathBuf, PathBuf) {
    let sub = dir.join(item.split.as_str());
    (sub.join(format!("{}_rgb.png", item.id)), sub.join(format!("{}_depth.png", item.id)))
}

/// RGB in `[-1, 1]` to 8-bit: `round((v + 1) / 2 * 255)`.
pub fn rgb_to_u8(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0) + 0.5).floor() as u8
}

pub fn u8_to_rgb(v: u8) -> f32 {
    2.0 * v as f32 / 255.0 - 1.0
}

/// Meters to millimeters, clipped at 65.535 m.
pub fn depth_to_mm(d: f32) -> u16 {
    ((d as f64 * 1000.0 + 0.5).floor()).clamp(0.0, 65535.0) as u16
}

pub fn save_rgb_png(rgb: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = (rgb.h, rgb.w);
    let plane = h * w;
    let mut bytes = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for ch in 0..3 {
            bytes.push(rgb_to_u8(rgb.data[ch * plane + p]));
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::InvalidArgument("rgb buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn load_rgb_png(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut t = Tensor::zeros(1, 3, h, w);
    for (p, px) in img.pixels().enumerate() {
        for ch in 0..3 {
            t.data[ch * plane + p] = u8_to_rgb(px.0[ch]);
        }
    }
    Ok(t)
}

pub fn save_depth_png(depth: &Tensor, path: &Path) -> Result<()> {
    let raw: Vec<u16> = depth.data.iter().map(|&d| depth_to_mm(d)).collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(depth.w as u32, depth.h as u32, raw)
        .ok_or_else(|| Error::InvalidArgument("depth buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

pub fn load_depth_png(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    let img = image::open(path)?.into_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|mm| mm as f32 / 1000.0).collect();
    Tensor::from_vec(1, 1, h, w, data)
}

pub fn save_dataset(manifest: &DatasetManifest, panoramas: &[Panorama], dir: &Path) -> Result<()> {
    if panoramas.len() != manifest.items.len() {
        return invalid("one panorama per manifest item is required");
    }
    for split in Split::ALL {
        fs::create_dir_all(dir.join(split.as_str()))?;
    }
    for (item, pano) in manifest.items.iter().zip(panoramas) {
        let (rgb_path, depth_path) = item_paths(dir, item);
        save_rgb_png(&pano.rgb, &rgb_path)?;
        save_depth_png(&pano.depth, &depth_path)?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::NotFound(path.display().to_string()));
    }
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn load_item(dir: &Path, item: &ManifestItem) -> Result<Panorama> {
    let (rgb_path, depth_path) = item_paths(dir, item);
    Panorama::new(load_rgb_png(&rgb_path)?, load_depth_png(&depth_path)?)
}

/// Loads every item of one split, in manifest order.
pub fn load_split(dir: &Path, split: Split) -> Result<(DatasetManifest, Vec<Panorama>)> {
    let manifest = load_manifest(dir)?;
    let panos = manifest.ids(split).into_iter().map(|it| load_item(dir, it)).collect::<Result<Vec<_>>>()?;
    Ok((manifest, panos))
}
