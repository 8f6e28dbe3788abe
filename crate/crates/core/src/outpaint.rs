//! Masked latent sampling: at every reverse step the visible latent cells are
//! re-noised from the encoded input and the rest are denoised, optionally
//! after rotating the whole scene by 90° so the seam keeps moving into the
//! middle of the denoiser's view.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::AutoencoderBundle;
use crate::diffusion::{ddpm_step_to, q_sample, LatentDiffusion, NoisePredictor, NoiseSchedule};
use crate::error::{invalid, Result};
use crate::pano::{circular_shift, downsample_mask, DownsamplePolicy, Mask, LATENT_FACTOR};
use crate::synth::{save_depth_png, save_rgb_png};
use crate::tensor::Tensor;

/// Depth supplied alongside the masked image, with its own visibility.
#[derive(Clone, Debug)]
pub struct DepthHint {
    /// Metric depth, `1 x 1 x H x W`.
    pub depth: Tensor,
    pub mask: Mask,
}

#[derive(Clone, Debug)]
pub struct OutpaintRequest {
    pub id: String,
    /// RGB in `[-1, 1]`, `1 x 3 x H x W`. Masked pixels are ignored.
    pub rgb: Tensor,
    pub mask: Mask,
    /// `None` treats depth as fully unknown.
    pub depth: Option<DepthHint>,
    pub n_samples: usize,
    pub align: bool,
    pub composite: bool,
    pub seed: u64,
}

impl OutpaintRequest {
    pub fn new(id: impl Into<String>, rgb: Tensor, mask: Mask, seed: u64) -> Self {
        OutpaintRequest { id: id.into(), rgb, mask, depth: None, n_samples: 1, align: true, composite: false, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.rgb.h, self.rgb.w);
        if self.rgb.n != 1 || self.rgb.c != 3 {
            return invalid(format!("request rgb must be 1x3xHxW, got {:?}", self.rgb.shape()));
        }
        if h % LATENT_FACTOR != 0 || w % LATENT_FACTOR != 0 {
            return invalid(format!("panorama {h}x{w} is not divisible by {LATENT_FACTOR}"));
        }
        if (self.mask.h, self.mask.w) != (h, w) {
            return invalid(format!("mask {}x{} does not match image {h}x{w}", self.mask.h, self.mask.w));
        }
        if let Some(d) = &self.depth {
            if d.depth.shape() != [1, 1, h, w] || (d.mask.h, d.mask.w) != (h, w) {
                return invalid("depth hint must match the image size");
            }
        }
        if self.n_samples == 0 {
            return invalid("n_samples must be at least 1");
        }
        Ok(())
    }
}

/// Bookkeeping of the per-step alignment shifts, in latent columns.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationLedger {
    pub width: usize,
    pub shifts: Vec<i64>,
    pub cumulative: i64,
}

impl RotationLedger {
    pub fn new(width: usize) -> Self {
        RotationLedger { width, shifts: Vec::new(), cumulative: 0 }
    }

    pub fn record(&mut self, shift: i64) {
        self.shifts.push(shift);
        self.cumulative = (self.cumulative + shift).rem_euclid(self.width.max(1) as i64);
    }

    /// Hex SHA-256 over the width and the shift sequence.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.width as u64).to_le_bytes());
        for s in &self.shifts {
            h.update(s.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Visible latent (diffusion space) and the per-channel latent mask.
///
/// The RGB channels encode the masked image with hidden pixels set to 0; a
/// latent cell counts as visible only when its whole pixel block is. Without
/// a depth hint the depth channel is standard normal noise and fully masked.
pub fn prepare_latents(
    req: &OutpaintRequest,
    bundle: &AutoencoderBundle,
    model: &LatentDiffusion,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor)> {
    req.validate()?;
    let mask_t = req.mask.to_tensor();
    let mut masked = req.rgb.clone();
    let plane = masked.plane();
    for c in 0..3 {
        for (v, m) in masked.data[c * plane..(c + 1) * plane].iter_mut().zip(&mask_t.data) {
            *v *= m;
        }
    }
    let rgb_latent = bundle.encode_rgb(&masked)?.data;
    let rgb_cells = downsample_mask(&req.mask, LATENT_FACTOR, DownsamplePolicy::AllVisible)?.to_tensor();
    let (lh, lw) = (rgb_latent.h, rgb_latent.w);
    let channels = model.config.latent_channels();

    let (z_raw, mask) = if channels == 4 {
        let (depth_latent, depth_cells) = match &req.depth {
            Some(hint) => {
                let hint_mask = hint.mask.to_tensor();
                let hidden = hint.depth.zip_map(&hint_mask, |d, m| d * m);
                let z = bundle.encode_depth(&hidden)?.data;
                (z, downsample_mask(&hint.mask, LATENT_FACTOR, DownsamplePolicy::AllVisible)?.to_tensor())
            }
            None => (Tensor::zeros(1, 1, lh, lw), Tensor::zeros(1, 1, lh, lw)),
        };
        let z = Tensor::concat_channels(&rgb_latent, &depth_latent)?;
        let mask = Tensor::concat_channels(&Tensor::concat_channels(&Tensor::concat_channels(&rgb_cells, &rgb_cells)?, &rgb_cells)?, &depth_cells)?;
        (z, mask)
    } else {
        let mask = Tensor::concat_channels(&Tensor::concat_channels(&rgb_cells, &rgb_cells)?, &rgb_cells)?;
        (rgb_latent, mask)
    };
    let mut z0 = model.stats.normalize(&z_raw);
    if channels == 4 && req.depth.is_none() {
        let noise = Tensor::randn(1, 1, lh, lw, rng);
        z0.data[3 * lh * lw..].copy_from_slice(&noise.data);
    }
    Ok((z0, mask))
}

/// One masked reverse step with explicit noise draws: `eps_visible` re-noises
/// the known latent to `t_prev`, `noise` drives the ancestral step.
#[allow(clippy::too_many_arguments)]
pub fn outpaint_step_with(
    z_t: &Tensor,
    t: usize,
    t_prev: usize,
    z0_visible: &Tensor,
    latent_mask: &Tensor,
    denoiser: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    eps_visible: &Tensor,
    noise: &Tensor,
) -> Result<Tensor> {
    z_t.ensure_same_shape(z0_visible, "visible latent")?;
    z_t.ensure_same_shape(latent_mask, "latent mask")?;
    let visible = if t_prev == 0 { z0_visible.clone() } else { q_sample(z0_visible, t_prev, eps_visible, schedule)? };
    let eps_hat = denoiser.predict(z_t, t);
    let invisible = ddpm_step_to(z_t, &eps_hat, t, t_prev, schedule, noise)?;
    let mut out = invisible;
    for ((o, v), m) in out.data.iter_mut().zip(&visible.data).zip(&latent_mask.data) {
        *o = m * v + (1.0 - m) * *o;
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn outpaint_step(
    z_t: &Tensor,
    t: usize,
    t_prev: usize,
    z0_visible: &Tensor,
    latent_mask: &Tensor,
    denoiser: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let [n, c, h, w] = z_t.shape();
    let eps_visible = Tensor::randn(n, c, h, w, rng);
    let noise = Tensor::randn(n, c, h, w, rng);
    outpaint_step_with(z_t, t, t_prev, z0_visible, latent_mask, denoiser, schedule, &eps_visible, &noise)
}

/// Shifts the latent, mask and visible latent by a quarter turn (`w/4` columns).
pub fn align_rotate(
    z_t: &Tensor,
    latent_mask: &Tensor,
    z0_visible: &Tensor,
    ledger: &mut RotationLedger,
) -> Result<(Tensor, Tensor, Tensor)> {
    if z_t.w % 4 != 0 {
        return invalid(format!("latent width {} is not divisible by 4", z_t.w));
    }
    let k = (z_t.w / 4) as i64;
    ledger.record(k);
    Ok((circular_shift(z_t, k), circular_shift(latent_mask, k), circular_shift(z0_visible, k)))
}

/// Trained models used at inference.
pub struct Models<'a> {
    pub bundle: &'a AutoencoderBundle,
    pub ldm: &'a LatentDiffusion,
}

#[derive(Clone, Debug)]
pub struct OutpaintSample {
    pub rgb: Tensor,
    /// Metric depth; absent for RGB-only models.
    pub depth: Option<Tensor>,
    pub ledger: RotationLedger,
}

/// Runs the masked sampler `n_samples` times with independent rng streams.
pub fn outpaint(req: &OutpaintRequest, models: &Models) -> Result<Vec<OutpaintSample>> {
    req.validate()?;
    let ldm = models.ldm;
    let steps = ldm.step_map();
    let mut out = Vec::with_capacity(req.n_samples);
    for k in 0..req.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
        rng.set_stream(k as u64);
        let (mut z0_vis, mut mask) = prepare_latents(req, models.bundle, ldm, &mut rng)?;
        let [n, c, h, w] = z0_vis.shape();
        let mut z = Tensor::randn(n, c, h, w, &mut rng);
        let mut ledger = RotationLedger::new(w);
        for (t, t_prev) in steps.pairs() {
            if req.align {
                (z, mask, z0_vis) = align_rotate(&z, &mask, &z0_vis, &mut ledger)?;
            }
            z = outpaint_step(&z, t, t_prev, &z0_vis, &mask, &ldm.unet, &ldm.schedule, &mut rng)?;
        }
        let z = ldm.stats.denormalize(&circular_shift(&z, -ledger.cumulative));
        let mut rgb = models.bundle.decode_rgb(&z.channels(0, 3))?;
        let mut depth = if c == 4 { Some(models.bundle.decode_depth(&z.channels(3, 1))?) } else { None };
        if req.composite {
            composite(&mut rgb, &req.rgb, &req.mask);
            if let (Some(d), Some(hint)) = (depth.as_mut(), &req.depth) {
                composite(d, &hint.depth, &hint.mask);
            }
        }
        out.push(OutpaintSample { rgb, depth, ledger });
    }
    Ok(out)
}

/// Copies `source` into `target` wherever `mask` is visible, for every channel.
fn composite(target: &mut Tensor, source: &Tensor, mask: &Mask) {
    let plane = target.plane();
    for c in 0..target.c {
        let range = c * plane..(c + 1) * plane;
        for ((t, s), &m) in target.data[range.clone()].iter_mut().zip(&source.data[range]).zip(mask.values()) {
            if m != 0 {
                *t = *s;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub id: String,
    pub sample: usize,
    pub seed: u64,
    pub align: bool,
    pub composite: bool,
    pub depth_hint: bool,
    pub steps: usize,
    pub cumulative_shift: i64,
    pub ledger_checksum: String,
}

/// Writes `{id}_sample{k}_rgb.png`, `{id}_sample{k}_depth.png` and
/// `{id}_sample{k}.json` for every sample; returns the written paths.
pub fn write_samples(dir: &Path, req: &OutpaintRequest, samples: &[OutpaintSample], steps: usize) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (k, s) in samples.iter().enumerate() {
        let stem = format!("{}_sample{k}", req.id);
        let rgb_path = dir.join(format!("{stem}_rgb.png"));
        save_rgb_png(&s.rgb, &rgb_path)?;
        paths.push(rgb_path);
        if let Some(d) = &s.depth {
            let p = dir.join(format!("{stem}_depth.png"));
            save_depth_png(d, &p)?;
            paths.push(p);
        }
        let sidecar = Sidecar {
            id: req.id.clone(),
            sample: k,
            seed: req.seed,
            align: req.align,
            composite: req.composite,
            depth_hint: req.depth.is_some(),
            steps,
            cumulative_shift: s.ledger.cumulative,
            ledger_checksum: s.ledger.checksum(),
        };
        let p = dir.join(format!("{stem}.json"));
        fs::write(&p, serde_json::to_string_pretty(&sidecar)?)?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::diffusion::ScheduleKind;
    use crate::unet::{UNet, UnetConfig};

    /// Predicts a fixed affine function of the input, enough to tell the branches apart.
    struct Affine;
    impl NoisePredictor for Affine {
        fn predict(&self, z: &Tensor, t: usize) -> Tensor {
            z.map(|v| 0.5 * v + t as f32 * 1e-3)
        }
    }

    fn schedule() -> NoiseSchedule {
        make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap()
    }

    fn draws(shape: [usize; 4], seed: u64) -> (Tensor, Tensor, Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [n, c, h, w] = shape;
        (Tensor::randn(n, c, h, w, &mut rng), Tensor::randn(n, c, h, w, &mut rng), Tensor::randn(n, c, h, w, &mut rng), Tensor::randn(n, c, h, w, &mut rng))
    }

    #[test]
    fn full_mask_is_forward_path() {
        let s = schedule();
        let (z, z0, e, n) = draws([1, 4, 2, 4], 1);
        let ones = Tensor::full(1, 4, 2, 4, 1.0);
        let out = outpaint_step_with(&z, 500, 495, &z0, &ones, &Affine, &s, &e, &n).unwrap();
        assert_eq!(out, q_sample(&z0, 495, &e, &s).unwrap());
    }

    #[test]
    fn empty_mask_is_plain_reverse_step() {
        let s = schedule();
        let (z, z0, e, n) = draws([1, 4, 2, 4], 2);
        let zeros = Tensor::zeros(1, 4, 2, 4);
        let out = outpaint_step_with(&z, 500, 499, &z0, &zeros, &Affine, &s, &e, &n).unwrap();
        assert_eq!(out, crate::diffusion::ddpm_step(&z, &Affine.predict(&z, 500), 500, &s, &n).unwrap());
    }

    #[test]
    fn mixed_mask_blends_elementwise() {
        let s = schedule();
        let (z, z0, e, n) = draws([1, 4, 2, 2], 3);
        let mut mask = Tensor::zeros(1, 4, 2, 2);
        for i in [0, 3, 5, 6, 12, 15] {
            mask.data[i] = 1.0;
        }
        let (t, tp) = (300usize, 295usize);
        let out = outpaint_step_with(&z, t, tp, &z0, &mask, &Affine, &s, &e, &n).unwrap();
        let (abar_t, abar_p) = (s.alpha_bar(t), s.alpha_bar(tp));
        let alpha = abar_t / abar_p;
        let beta = 1.0 - alpha;
        let sigma = (beta * (1.0 - abar_p) / (1.0 - abar_t)).sqrt();
        for i in 0..16 {
            let zt = z.data[i] as f64;
            let expect = if mask.data[i] == 1.0 {
                abar_p.sqrt() * z0.data[i] as f64 + (1.0 - abar_p).sqrt() * e.data[i] as f64
            } else {
                let eps_hat = 0.5 * zt + t as f64 * 1e-3;
                (zt - beta / (1.0 - abar_t).sqrt() * eps_hat) / alpha.sqrt() + sigma * n.data[i] as f64
            };
            assert!((out.data[i] as f64 - expect).abs() < 1e-5, "cell {i}");
        }
    }

    #[test]
    fn last_step_keeps_visible_latent() {
        let s = schedule();
        let (z, z0, e, n) = draws([1, 3, 2, 4], 4);
        let ones = Tensor::full(1, 3, 2, 4, 1.0);
        assert_eq!(outpaint_step_with(&z, 1, 0, &z0, &ones, &Affine, &s, &e, &n).unwrap(), z0);
    }

    #[test]
    fn four_rotations_cancel() {
        let mut ledger = RotationLedger::new(32);
        let z = Tensor::randn(1, 4, 16, 32, &mut ChaCha8Rng::seed_from_u64(0));
        let (mut a, mut b, mut c) = (z.clone(), z.clone(), z.clone());
        for _ in 0..4 {
            (a, b, c) = align_rotate(&a, &b, &c, &mut ledger).unwrap();
        }
        assert_eq!(ledger.shifts, vec![8; 4]);
        assert_eq!(ledger.cumulative, 0);
        assert_eq!((a.clone(), b, c), (z.clone(), z.clone(), z));
        assert!(align_rotate(&Tensor::zeros(1, 1, 2, 6), &a, &a, &mut ledger).is_err());
    }

    #[test]
    fn rotation_commutes_with_step() {
        let s = schedule();
        let cfg = UnetConfig { in_channels: 4, widths: [8, 8], time_dim: 8, groups: 4, ..UnetConfig::default() };
        let mut net = UNet::new(cfg, 5);
        // give the zero-initialized output layer weights so the map is not trivial
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in crate::nn::Module::params_mut(&mut net) {
            if p.name.starts_with("conv_out.weight") || p.name.ends_with("conv2.weight") {
                *p = crate::nn::Param::uniform(p.name.clone(), p.shape.clone(), 0.2, &mut rng);
            }
        }
        let (z, z0, e, n) = draws([1, 4, 4, 16], 6);
        let mut mask = Tensor::zeros(1, 4, 4, 16);
        for x in 0..8 {
            for c in 0..3 {
                for y in 0..4 {
                    mask.data[(c * 4 + y) * 16 + x] = 1.0;
                }
            }
        }
        let direct = outpaint_step_with(&z, 700, 695, &z0, &mask, &net, &s, &e, &n).unwrap();
        let mut ledger = RotationLedger::new(16);
        let (rz, rm, r0) = align_rotate(&z, &mask, &z0, &mut ledger).unwrap();
        let k = ledger.cumulative;
        let rotated = outpaint_step_with(&rz, 700, 695, &r0, &rm, &net, &s, &circular_shift(&e, k), &circular_shift(&n, k)).unwrap();
        assert!(circular_shift(&rotated, -k).max_abs_diff(&direct) < 1e-4);
    }

    #[test]
    fn ledger_checksum_tracks_history() {
        let mut a = RotationLedger::new(32);
        let mut b = RotationLedger::new(32);
        a.record(8);
        b.record(8);
        assert_eq!(a.checksum(), b.checksum());
        b.record(8);
        assert_ne!(a.checksum(), b.checksum());
    }

    fn tiny_models() -> (AutoencoderBundle, LatentDiffusion) {
        use crate::autoencoder::{AutoencoderConfig, Modality, VqAutoencoder};
        use crate::diffusion::{LatentStats, LdmConfig};
        let ae = AutoencoderConfig { widths: [4, 8], codebook_size: 8, ..AutoencoderConfig::default() };
        let bundle = AutoencoderBundle { rgb: VqAutoencoder::new(Modality::Rgb, ae.clone()), depth: VqAutoencoder::new(Modality::Depth, ae), d_max: 10.0 };
        let cfg = LdmConfig { unet: UnetConfig { widths: [8, 8], groups: 4, ..UnetConfig::default() }, sampling_steps: 4, ..LdmConfig::default() };
        (bundle, LatentDiffusion::new(cfg, LatentStats::identity(4)).unwrap())
    }

    fn channel_sum(t: &Tensor, c: usize) -> f32 {
        t.channels(c, 1).data.iter().sum()
    }

    #[test]
    fn latent_mask_without_depth() {
        let (bundle, ldm) = tiny_models();
        let mut mask = Mask::all_visible(16, 32);
        for y in 4..8 {
            for x in 8..12 {
                mask.set(y, x, false);
            }
        }
        let req = OutpaintRequest::new("a", Tensor::zeros(1, 3, 16, 32), mask, 0);
        let (z0, m) = prepare_latents(&req, &bundle, &ldm, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(z0.shape(), [1, 4, 4, 8]);
        for c in 0..3 {
            assert_eq!(channel_sum(&m, c), 31.0);
            assert_eq!(m.channels(c, 1).data[8 + 2], 0.0);
        }
        assert_eq!(channel_sum(&m, 3), 0.0);
    }

    #[test]
    fn full_visibility_with_depth_gives_full_mask() {
        let (bundle, ldm) = tiny_models();
        let mut req = OutpaintRequest::new("a", Tensor::zeros(1, 3, 16, 32), Mask::all_visible(16, 32), 0);
        req.depth = Some(DepthHint { depth: Tensor::full(1, 1, 16, 32, 2.0), mask: Mask::all_visible(16, 32) });
        let (_, m) = prepare_latents(&req, &bundle, &ldm, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(m.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn request_validation() {
        let (bundle, ldm) = tiny_models();
        let req = OutpaintRequest::new("a", Tensor::zeros(1, 3, 18, 36), Mask::all_visible(18, 36), 0);
        assert!(prepare_latents(&req, &bundle, &ldm, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let req = OutpaintRequest::new("a", Tensor::zeros(1, 3, 16, 32), Mask::all_visible(16, 16), 0);
        assert!(req.validate().is_err());
    }

    #[test]
    fn all_visible_composite_returns_input() {
        let (bundle, ldm) = tiny_models();
        let rgb = Tensor::randn(1, 3, 16, 32, &mut ChaCha8Rng::seed_from_u64(1)).map(|v| v.clamp(-1.0, 1.0));
        let mut req = OutpaintRequest::new("a", rgb.clone(), Mask::all_visible(16, 32), 3);
        req.composite = true;
        let out = outpaint(&req, &Models { bundle: &bundle, ldm: &ldm }).unwrap();
        assert_eq!(out[0].rgb, rgb);
        assert_eq!(out[0].ledger.shifts.len(), 4);
        assert_eq!(out[0].ledger.cumulative, 0);
    }
}
