//! VQ autoencoders for RGB and depth with spatial factor 4.
//!
//! Every convolution pads the width axis circularly and the height axis with
//! zeros, so encoding commutes with circular shifts by multiples of 4 pixels
//! and decoding commutes with any latent shift.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::nn::{pixel_shuffle2, pixel_unshuffle2, silu, silu_backward, upsample_nearest2, upsample_nearest2_backward, Adam, AdamConfig, Conv2d, Module, Padding, Param};
use crate::pano::{circular_shift, LATENT_FACTOR};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
}

impl Modality {
    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Depth => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
        }
    }
}

/// Channel semantics of a latent grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentKind {
    Rgb3,
    Depth1,
    /// `Rgb3 ⊕ Depth1`: channels 0-2 RGB, channel 3 depth.
    Rgbd4,
}

impl LatentKind {
    pub fn channels(self) -> usize {
        match self {
            LatentKind::Rgb3 => 3,
            LatentKind::Depth1 => 1,
            LatentKind::Rgbd4 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub data: Tensor,
    pub kind: LatentKind,
}

impl LatentGrid {
    pub fn new(data: Tensor, kind: LatentKind) -> Result<Self> {
        if data.c != kind.channels() {
            return invalid(format!("{kind:?} latent needs {} channels, got {}", kind.channels(), data.c));
        }
        Ok(LatentGrid { data, kind })
    }

    /// `rgb ⊕ depth` along channels.
    pub fn concat(rgb: &LatentGrid, depth: &LatentGrid) -> Result<Self> {
        if rgb.kind != LatentKind::Rgb3 || depth.kind != LatentKind::Depth1 {
            return invalid("concat expects an rgb3 and a depth1 latent");
        }
        LatentGrid::new(Tensor::concat_channels(&rgb.data, &depth.data)?, LatentKind::Rgbd4)
    }

    /// Splits an rgbd4 latent into its rgb3 and depth1 parts.
    pub fn split(&self) -> Result<(LatentGrid, LatentGrid)> {
        if self.kind != LatentKind::Rgbd4 {
            return invalid("only rgbd4 latents can be split");
        }
        Ok((
            LatentGrid { data: self.data.channels(0, 3), kind: LatentKind::Rgb3 },
            LatentGrid { data: self.data.channels(3, 1), kind: LatentKind::Depth1 },
        ))
    }

    pub fn shifted(&self, columns: i64) -> LatentGrid {
        LatentGrid { data: circular_shift(&self.data, columns), kind: self.kind }
    }
}

/// `clip(depth, 0, d_max) * 2 / d_max - 1`.
pub fn depth_norm(depth: &Tensor, d_max: f32) -> Result<Tensor> {
    if !(d_max > 0.0) {
        return invalid(format!("d_max must be positive, got {d_max}"));
    }
    Ok(depth.map(|d| d.clamp(0.0, d_max) * 2.0 / d_max - 1.0))
}

/// Inverse of [`depth_norm`] on `[0, d_max]`.
pub fn depth_denorm(norm: &Tensor, d_max: f32) -> Result<Tensor> {
    if !(d_max > 0.0) {
        return invalid(format!("d_max must be positive, got {d_max}"));
    }
    Ok(norm.map(|v| (v + 1.0) * d_max / 2.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderConfig {
    /// Channel widths at full and reduced resolution.
    pub widths: [usize; 2],
    pub codebook_size: usize,
    pub commitment: f32,
    pub padding: Padding,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            widths: [48, 64],
            codebook_size: 256,
            commitment: 0.25,
            padding: Padding::Circular,
            epochs: 40,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// `x + conv_b(silu(conv_a(x)))`, with `conv_b` zero-initialised.
#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

struct ResCache {
    x: Tensor,
    h: Tensor,
    act: Tensor,
}

impl ResBlock {
    fn new(name: &str, ch: usize, pad: Padding, rng: &mut ChaCha8Rng) -> Self {
        ResBlock {
            a: Conv2d::new(&format!("{name}.a"), ch, ch, 3, 1, pad, rng),
            b: Conv2d::new(&format!("{name}.b"), ch, ch, 3, 1, pad, rng).zero_init(),
        }
    }

    fn forward_cached(&self, x: &Tensor) -> (Tensor, ResCache) {
        let h = self.a.forward(x);
        let act = silu(&h);
        let mut y = self.b.forward(&act);
        y.add_assign(x);
        (y, ResCache { x: x.clone(), h, act })
    }

    fn backward(&mut self, c: &ResCache, dy: &Tensor) -> Tensor {
        let dact = self.b.backward(&c.act, dy);
        let mut dx = self.a.backward(&c.x, &silu_backward(&c.h, &dact));
        dx.add_assign(dy);
        dx
    }

    fn convs(&self) -> [&Conv2d; 2] {
        [&self.a, &self.b]
    }

    fn convs_mut(&mut self) -> [&mut Conv2d; 2] {
        [&mut self.a, &mut self.b]
    }
}

/// Space-to-depth, a 3x3 conv at half resolution, a strided conv to quarter
/// resolution, residual blocks and a 1x1 projection to the latent channels.
#[derive(Clone, Debug)]
struct Encoder {
    conv_in: Conv2d,
    down: Conv2d,
    res: Vec<ResBlock>,
    out: Conv2d,
}

struct EncoderCache {
    u: Tensor,
    h1: Tensor,
    a1: Tensor,
    h2: Tensor,
    res: Vec<ResCache>,
    a3: Tensor,
}

impl Encoder {
    fn new(cin: usize, latent: usize, [c1, c2]: [usize; 2], pad: Padding, rng: &mut ChaCha8Rng) -> Self {
        Encoder {
            conv_in: Conv2d::new("enc.conv_in", 4 * cin, c1, 3, 1, pad, rng),
            down: Conv2d::new("enc.down", c1, c2, 3, 2, pad, rng),
            res: (0..2).map(|i| ResBlock::new(&format!("enc.res{i}"), c2, pad, rng)).collect(),
            out: Conv2d::new("enc.out", c2, latent, 1, 1, pad, rng),
        }
    }

    fn forward_cached(&self, x: &Tensor) -> (Tensor, EncoderCache) {
        let u = pixel_unshuffle2(x);
        let h1 = self.conv_in.forward(&u);
        let a1 = silu(&h1);
        let h2 = self.down.forward(&a1);
        let mut a = silu(&h2);
        let mut caches = Vec::with_capacity(self.res.len());
        for block in &self.res {
            let (y, c) = block.forward_cached(&a);
            caches.push(c);
            a = y;
        }
        let z = self.out.forward(&a);
        (z, EncoderCache { u, h1, a1, h2, res: caches, a3: a })
    }

    fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_cached(x).0
    }

    fn backward(&mut self, c: &EncoderCache, dz: &Tensor) {
        let mut da = self.out.backward(&c.a3, dz);
        for (block, cache) in self.res.iter_mut().zip(&c.res).rev() {
            da = block.backward(cache, &da);
        }
        let da1 = self.down.backward(&c.a1, &silu_backward(&c.h2, &da));
        self.conv_in.backward(&c.u, &silu_backward(&c.h1, &da1));
    }
}

impl Module for Encoder {
    fn params(&self) -> Vec<&Param> {
        let mut convs = vec![&self.conv_in, &self.down];
        convs.extend(self.res.iter().flat_map(|r| r.convs()));
        convs.push(&self.out);
        convs.into_iter().flat_map(|c| c.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut convs = vec![&mut self.conv_in, &mut self.down];
        convs.extend(self.res.iter_mut().flat_map(|r| r.convs_mut()));
        convs.push(&mut self.out);
        convs.into_iter().flat_map(|c| c.params_mut()).collect()
    }
}

/// Mirror of the encoder: residual blocks at quarter resolution, nearest
/// upsampling to half resolution, and depth-to-space to full resolution.
#[derive(Clone, Debug)]
struct Decoder {
    conv_in: Conv2d,
    res: Vec<ResBlock>,
    up: Conv2d,
    mid: Conv2d,
    out: Conv2d,
}

struct DecoderCache {
    z: Tensor,
    h0: Tensor,
    res: Vec<ResCache>,
    u: Tensor,
    h1: Tensor,
    a1: Tensor,
    h2: Tensor,
    a2: Tensor,
}

impl Decoder {
    fn new(latent: usize, cout: usize, [c1, c2]: [usize; 2], pad: Padding, rng: &mut ChaCha8Rng) -> Self {
        Decoder {
            conv_in: Conv2d::new("dec.conv_in", latent, c2, 3, 1, pad, rng),
            res: (0..2).map(|i| ResBlock::new(&format!("dec.res{i}"), c2, pad, rng)).collect(),
            up: Conv2d::new("dec.up", c2, c1, 3, 1, pad, rng),
            mid: Conv2d::new("dec.mid", c1, c1, 3, 1, pad, rng),
            out: Conv2d::new("dec.out", c1, 4 * cout, 3, 1, pad, rng),
        }
    }

    fn forward_cached(&self, z: &Tensor) -> (Tensor, DecoderCache) {
        let h0 = self.conv_in.forward(z);
        let mut a = silu(&h0);
        let mut caches = Vec::with_capacity(self.res.len());
        for block in &self.res {
            let (y, c) = block.forward_cached(&a);
            caches.push(c);
            a = y;
        }
        let u = upsample_nearest2(&a);
        let h1 = self.up.forward(&u);
        let a1 = silu(&h1);
        let h2 = self.mid.forward(&a1);
        let a2 = silu(&h2);
        let y = pixel_shuffle2(&self.out.forward(&a2));
        (y, DecoderCache { z: z.clone(), h0, res: caches, u, h1, a1, h2, a2 })
    }

    fn forward(&self, z: &Tensor) -> Tensor {
        self.forward_cached(z).0
    }

    fn backward(&mut self, c: &DecoderCache, dy: &Tensor) -> Tensor {
        let da2 = self.out.backward(&c.a2, &pixel_unshuffle2(dy));
        let da1 = self.mid.backward(&c.a1, &silu_backward(&c.h2, &da2));
        let du = self.up.backward(&c.u, &silu_backward(&c.h1, &da1));
        let mut da = upsample_nearest2_backward(&du);
        for (block, cache) in self.res.iter_mut().zip(&c.res).rev() {
            da = block.backward(cache, &da);
        }
        self.conv_in.backward(&c.z, &silu_backward(&c.h0, &da))
    }
}

impl Module for Decoder {
    fn params(&self) -> Vec<&Param> {
        let mut convs = vec![&self.conv_in];
        convs.extend(self.res.iter().flat_map(|r| r.convs()));
        convs.extend([&self.up, &self.mid, &self.out]);
        convs.into_iter().flat_map(|c| c.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut convs = vec![&mut self.conv_in];
        convs.extend(self.res.iter_mut().flat_map(|r| r.convs_mut()));
        convs.extend([&mut self.up, &mut self.mid, &mut self.out]);
        convs.into_iter().flat_map(|c| c.params_mut()).collect()
    }
}

/// Result of vector quantization.
#[derive(Clone, Debug)]
pub struct Quantized {
    pub z_q: Tensor,
    /// Codebook index per latent position, in `n, y, x` order.
    pub indices: Vec<u32>,
    /// `mean ‖sg(z) − e‖²`, the loss that moves codebook entries.
    pub codebook_loss: f32,
    /// `mean ‖z − sg(e)‖²`, the loss that pulls encoder outputs to their codes.
    pub commitment_loss: f32,
}

/// Replaces each latent vector by its nearest codebook entry (squared
/// Euclidean distance, ties to the lowest index). `codebook` is `K x dim`.
pub fn quantize(z: &Tensor, codebook: &[f32], dim: usize) -> Result<Quantized> {
    if codebook.is_empty() || dim == 0 || codebook.len() % dim != 0 {
        return invalid("codebook must be a non-empty K x dim table");
    }
    if z.c != dim {
        return invalid(format!("latent has {} channels, codebook dim is {dim}", z.c));
    }
    let plane = z.plane();
    let mut z_q = z.clone();
    let mut indices = Vec::with_capacity(z.n * plane);
    let mut sq = 0.0f64;
    let mut v = vec![0.0f32; dim];
    for n in 0..z.n {
        for p in 0..plane {
            for (c, vc) in v.iter_mut().enumerate() {
                *vc = z.data[(n * dim + c) * plane + p];
            }
            let mut best = 0usize;
            let mut best_d = f32::INFINITY;
            for (k, e) in codebook.chunks_exact(dim).enumerate() {
                let d: f32 = e.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            let e = &codebook[best * dim..(best + 1) * dim];
            for c in 0..dim {
                z_q.data[(n * dim + c) * plane + p] = e[c];
            }
            sq += best_d as f64;
            indices.push(best as u32);
        }
    }
    let loss = (sq / z.len().max(1) as f64) as f32;
    Ok(Quantized { z_q, indices, codebook_loss: loss, commitment_loss: loss })
}

/// One VQ autoencoder (encoder, codebook, decoder) for a single modality.
#[derive(Clone, Debug)]
pub struct VqAutoencoder {
    pub modality: Modality,
    pub config: AutoencoderConfig,
    encoder: Encoder,
    decoder: Decoder,
    pub codebook: Param,
}

impl Module for VqAutoencoder {
    fn params(&self) -> Vec<&Param> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p.push(&self.codebook);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p.push(&mut self.codebook);
        p
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub reconstruction: f32,
    pub codebook: f32,
    pub total: f32,
    pub codes_used: usize,
}

impl VqAutoencoder {
    pub fn new(modality: Modality, config: AutoencoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let ch = modality.channels();
        let encoder = Encoder::new(ch, ch, config.widths, config.padding, &mut rng);
        let decoder = Decoder::new(ch, ch, config.widths, config.padding, &mut rng);
        let codebook = Param::uniform("codebook", vec![config.codebook_size, ch], 1.0 / config.codebook_size as f32, &mut rng);
        VqAutoencoder { modality, config, encoder, decoder, codebook }
    }

    pub fn latent_channels(&self) -> usize {
        self.modality.channels()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c != self.modality.channels() {
            return invalid(format!("{} encoder expects {} channels, got {}", self.modality.as_str(), self.modality.channels(), x.c));
        }
        if x.h % LATENT_FACTOR != 0 || x.w % LATENT_FACTOR != 0 {
            return invalid(format!("input {}x{} is not divisible by {LATENT_FACTOR}", x.h, x.w));
        }
        Ok(())
    }

    /// Continuous (pre-quantization) latent. Depth input must already be normalized.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.encoder.forward(x))
    }

    pub fn quantize(&self, z: &Tensor) -> Result<Quantized> {
        quantize(z, &self.codebook.value, self.latent_channels())
    }

    /// Decodes a latent to `[-1, 1]` (outputs are clamped).
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.c != self.latent_channels() {
            return invalid(format!("{} decoder expects {} latent channels, got {}", self.modality.as_str(), self.latent_channels(), z.c));
        }
        Ok(self.decoder.forward(z).map(|v| v.clamp(-1.0, 1.0)))
    }

    /// `decode(quantize(encode(x)))`.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let z = self.encode(x)?;
        self.decode(&self.quantize(&z)?.z_q)
    }

    /// One optimization step on a batch; returns (reconstruction L1, vq loss, indices).
    fn train_step(&mut self, x: &Tensor, adam: &mut Adam) -> (f32, f32, Vec<u32>) {
        let dim = self.latent_channels();
        let (z, enc_cache) = self.encoder.forward_cached(x);
        let q = quantize(&z, &self.codebook.value, dim).expect("codebook shape checked at construction");
        let (y, dec_cache) = self.decoder.forward_cached(&q.z_q);
        let count = y.len() as f32;
        let rec = y.data.iter().zip(&x.data).map(|(a, b)| (a - b).abs()).sum::<f32>() / count;
        let dy = y.zip_map(x, |a, b| if a > b { 1.0 / count } else if a < b { -1.0 / count } else { 0.0 });
        // straight-through estimator: the decoder gradient flows to z unchanged
        let mut dz = self.decoder.backward(&dec_cache, &dy);
        let nz = z.len() as f32;
        let beta = self.config.commitment;
        for (g, (zv, qv)) in dz.data.iter_mut().zip(z.data.iter().zip(&q.z_q.data)) {
            *g += beta * 2.0 * (zv - qv) / nz;
        }
        let plane = z.plane();
        for n in 0..z.n {
            for p in 0..plane {
                let k = q.indices[n * plane + p] as usize;
                for c in 0..dim {
                    let i = (n * dim + c) * plane + p;
                    self.codebook.grad[k * dim + c] += 2.0 * (q.z_q.data[i] - z.data[i]) / nz;
                }
            }
        }
        self.encoder.backward(&enc_cache, &dz);
        adam.step(self);
        (rec, q.codebook_loss * (1.0 + beta), q.indices)
    }

    /// Overwrites `codes` with latent vectors drawn from `z`.
    fn reseed_codes(&mut self, codes: &[usize], z: &Tensor, rng: &mut ChaCha8Rng) {
        let dim = self.latent_channels();
        let plane = z.plane();
        for &k in codes {
            let n = rng.random_range(0..z.n);
            let p = rng.random_range(0..plane);
            for c in 0..dim {
                let jitter = rng.random_range(-1e-3..1e-3);
                self.codebook.value[k * dim + c] = z.data[(n * dim + c) * plane + p] + jitter;
            }
        }
    }

    pub fn save(&self, ckpt: &mut Checkpoint) {
        ckpt.insert_module("", self);
    }

    pub fn load(modality: Modality, ckpt: &Checkpoint) -> Result<Self> {
        let config: AutoencoderConfig = serde_json::from_value(ckpt.config.clone())?;
        let mut ae = VqAutoencoder::new(modality, config);
        ckpt.load_module("", &mut ae)?;
        Ok(ae)
    }

    pub fn save_dir(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        let kind = format!("vae-{}", self.modality.as_str());
        let mut ckpt = Checkpoint::new(&kind, self.config.seed, serde_json::to_value(&self.config)?);
        ckpt.extra = extra;
        self.save(&mut ckpt);
        ckpt.save(dir)
    }

    pub fn load_dir(modality: Modality, dir: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(dir).map_err(|e| match e {
            Error::NotFound(p) => Error::InvalidState(format!("missing {} autoencoder checkpoint ({p})", modality.as_str())),
            other => other,
        })?;
        Self::load(modality, &ckpt)
    }
}

/// Trains a fresh autoencoder on model-ready inputs (RGB in `[-1, 1]`, or
/// normalized depth). Each epoch visits the data in a seeded order with a
/// random horizontal roll per image.
pub fn train_autoencoder(
    modality: Modality,
    images: &[Tensor],
    config: &AutoencoderConfig,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<(VqAutoencoder, Vec<EpochLoss>)> {
    if images.is_empty() {
        return invalid("autoencoder training needs a non-empty training split");
    }
    let mut ae = VqAutoencoder::new(modality, config.clone());
    for img in images {
        ae.check_input(img)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ae);
    let base_lr = config.lr;
    let mut adam = Adam::new(AdamConfig { lr: base_lr, ..AdamConfig::default() }, &ae);
    let batch = config.batch_size.max(1);
    let steps_per_epoch = images.len().div_ceil(batch);
    let total_steps = (config.epochs * steps_per_epoch).max(1);
    let mut history = Vec::with_capacity(config.epochs);

    // data-dependent codebook init from the first batch's encodings
    let init = Tensor::stack(&images[..batch.min(images.len())])?;
    let z0 = ae.encoder.forward(&init);
    let all: Vec<usize> = (0..config.codebook_size).collect();
    ae.reseed_codes(&all, &z0, &mut rng);

    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut used = vec![false; config.codebook_size];
        let (mut rec_sum, mut vq_sum, mut batches) = (0.0f64, 0.0f64, 0usize);
        let mut last_batch = None;
        for chunk in order.chunks(batch) {
            let items: Vec<Tensor> = chunk
                .iter()
                .map(|&i| {
                    let shift = rng.random_range(0..images[i].w as i64);
                    circular_shift(&images[i], shift)
                })
                .collect();
            let x = Tensor::stack(&items)?;
            let progress = (epoch * steps_per_epoch + batches) as f32 / total_steps as f32;
            adam.config.lr = base_lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos()));
            let (rec, vq, indices) = ae.train_step(&x, &mut adam);
            for i in indices {
                used[i as usize] = true;
            }
            rec_sum += rec as f64;
            vq_sum += vq as f64;
            batches += 1;
            last_batch = Some(x);
        }
        let dead: Vec<usize> = used.iter().enumerate().filter(|(_, u)| !**u).map(|(k, _)| k).collect();
        let codes_used = config.codebook_size - dead.len();
        if epoch + 1 < config.epochs && !dead.is_empty() {
            if let Some(x) = &last_batch {
                let z = ae.encoder.forward(x);
                ae.reseed_codes(&dead, &z, &mut rng);
            }
        }
        let rec = (rec_sum / batches as f64) as f32;
        let vq = (vq_sum / batches as f64) as f32;
        let entry = EpochLoss { epoch, reconstruction: rec, codebook: vq, total: rec + vq, codes_used };
        on_epoch(&entry);
        history.push(entry);
    }
    Ok((ae, history))
}

/// The frozen RGB and depth autoencoders used by the diffusion model.
#[derive(Clone, Debug)]
pub struct AutoencoderBundle {
    pub rgb: VqAutoencoder,
    pub depth: VqAutoencoder,
    pub d_max: f32,
}

impl AutoencoderBundle {
    pub fn encode_rgb(&self, rgb: &Tensor) -> Result<LatentGrid> {
        LatentGrid::new(self.rgb.encode(rgb)?, LatentKind::Rgb3)
    }

    /// Normalizes metric depth and encodes it.
    pub fn encode_depth(&self, depth: &Tensor) -> Result<LatentGrid> {
        LatentGrid::new(self.depth.encode(&depth_norm(depth, self.d_max)?)?, LatentKind::Depth1)
    }

    /// `E1(rgb) ⊕ E2(norm(depth))`.
    pub fn encode_rgbd(&self, rgb: &Tensor, depth: &Tensor) -> Result<LatentGrid> {
        LatentGrid::concat(&self.encode_rgb(rgb)?, &self.encode_depth(depth)?)
    }

    /// Quantizes and decodes an RGB latent to `[-1, 1]`.
    pub fn decode_rgb(&self, z: &Tensor) -> Result<Tensor> {
        self.rgb.decode(&self.rgb.quantize(z)?.z_q)
    }

    /// Quantizes and decodes a depth latent to meters.
    pub fn decode_depth(&self, z: &Tensor) -> Result<Tensor> {
        depth_denorm(&self.depth.decode(&self.depth.quantize(z)?.z_q)?, self.d_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> AutoencoderConfig {
        AutoencoderConfig { widths: [4, 8], codebook_size: 16, ..AutoencoderConfig::default() }
    }

    #[test]
    fn latent_shapes() {
        let ae = VqAutoencoder::new(Modality::Rgb, tiny());
        let z = ae.encode(&Tensor::zeros(1, 3, 64, 128)).unwrap();
        assert_eq!(z.shape(), [1, 3, 16, 32]);
        assert!(z.is_finite());
        let d = VqAutoencoder::new(Modality::Depth, tiny());
        let y = d.decode(&Tensor::zeros(1, 1, 16, 32)).unwrap();
        assert_eq!(y.shape(), [1, 1, 64, 128]);
    }

    #[test]
    fn wrong_channels_rejected() {
        let ae = VqAutoencoder::new(Modality::Rgb, tiny());
        assert!(matches!(ae.encode(&Tensor::zeros(1, 1, 8, 16)), Err(Error::InvalidArgument(_))));
        assert!(ae.encode(&Tensor::zeros(1, 3, 6, 12)).is_err());
        assert!(ae.decode(&Tensor::zeros(1, 4, 4, 8)).is_err());
    }

    #[test]
    fn quantize_fixed_point() {
        let codebook: Vec<f32> = (0..8).flat_map(|k| [k as f32, -(k as f32), 0.5 * k as f32]).collect();
        let mut z = Tensor::zeros(1, 3, 2, 3);
        for p in 0..6 {
            z.data[p] = 5.0;
            z.data[6 + p] = -5.0;
            z.data[12 + p] = 2.5;
        }
        let q = quantize(&z, &codebook, 3).unwrap();
        assert!(q.indices.iter().all(|&i| i == 5));
        assert_eq!(q.codebook_loss, 0.0);
        assert_eq!(q.commitment_loss, 0.0);
        assert_eq!(q.z_q, z);
    }

    #[test]
    fn quantize_nearest_and_ties() {
        let codebook = vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let z = Tensor::from_vec(1, 3, 1, 1, vec![0.4, 0.4, 0.4]).unwrap();
        let q = quantize(&z, &codebook, 3).unwrap();
        assert_eq!(q.indices, vec![0]);
        assert_eq!(q.z_q.data, vec![0.0, 0.0, 0.0]);
        // (0.4-0)^2*3 = 0.48 per vector, mean over 3 elements
        assert!((q.codebook_loss - 0.16).abs() < 1e-6);
        let tie = Tensor::from_vec(1, 3, 1, 1, vec![0.5, 0.5, 0.5]).unwrap();
        assert_eq!(quantize(&tie, &codebook, 3).unwrap().indices, vec![0]);
        let dup = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(quantize(&tie, &dup, 3).unwrap().indices, vec![0]);
        assert!(quantize(&tie, &[], 3).is_err());
    }

    #[test]
    fn quantize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let codebook: Vec<f32> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = Tensor::randn(2, 3, 4, 5, &mut rng);
        let q = quantize(&z, &codebook, 3).unwrap();
        let qq = quantize(&q.z_q, &codebook, 3).unwrap();
        assert_eq!(qq.z_q, q.z_q);
        assert_eq!(qq.codebook_loss, 0.0);
    }

    #[test]
    fn depth_norm_pair() {
        let d = Tensor::from_vec(1, 1, 1, 4, vec![0.0, 10.0, 3.7, 12.0]).unwrap();
        let n = depth_norm(&d, 10.0).unwrap();
        assert_eq!(n.data[0], -1.0);
        assert_eq!(n.data[1], 1.0);
        assert_eq!(n.data[3], 1.0);
        let back = depth_denorm(&n, 10.0).unwrap();
        assert!((back.data[2] - 3.7).abs() < 1e-6);
        assert!(depth_norm(&d, 0.0).is_err());
        assert!(depth_denorm(&n, -1.0).is_err());
    }

    #[test]
    fn encode_decode_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ae = VqAutoencoder::new(Modality::Rgb, tiny());
        let x = Tensor::randn(1, 3, 16, 32, &mut rng);
        let z = ae.encode(&x).unwrap();
        for k in [1i64, 3, 7] {
            let zs = ae.encode(&circular_shift(&x, 4 * k)).unwrap();
            assert!(zs.max_abs_diff(&circular_shift(&z, k)) < 1e-5);
            let y = ae.decode(&circular_shift(&z, k)).unwrap();
            assert!(y.max_abs_diff(&circular_shift(&ae.decode(&z).unwrap(), 4 * k)) < 1e-5);
        }
    }

    #[test]
    fn gradient_check_through_autoencoder() {
        // With a huge codebook spacing the quantizer is locally constant, so
        // check the decoder and encoder paths separately against finite differences.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut ae = VqAutoencoder::new(Modality::Depth, tiny());
        let x = Tensor::randn(1, 1, 8, 16, &mut rng);
        let g = Tensor::randn(1, 1, 2, 4, &mut rng);
        let (z, cache) = ae.encoder.forward_cached(&x);
        let loss = |enc: &Encoder| -> f64 { enc.forward(&x).data.iter().zip(&g.data).map(|(a, b)| (*a * *b) as f64).sum() };
        ae.encoder.backward(&cache, &g);
        let _ = z;
        let eps = 1e-2;
        for idx in [0usize, 7, 30] {
            let mut plus = ae.encoder.clone();
            plus.conv_in.weight.value[idx] += eps;
            let mut minus = ae.encoder.clone();
            minus.conv_in.weight.value[idx] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps as f64);
            let an = ae.encoder.conv_in.weight.grad[idx] as f64;
            assert!((fd - an).abs() < 2e-3 * (1.0 + fd.abs()), "enc w[{idx}] {fd} vs {an}");
        }
        let zin = Tensor::randn(1, 1, 2, 4, &mut rng);
        let gy = Tensor::randn(1, 1, 8, 16, &mut rng);
        let (_, dcache) = ae.decoder.forward_cached(&zin);
        let dz = ae.decoder.backward(&dcache, &gy);
        let dloss = |z: &Tensor| -> f64 { ae.decoder.forward(z).data.iter().zip(&gy.data).map(|(a, b)| (*a * *b) as f64).sum() };
        for i in 0..zin.len() {
            let mut zp = zin.clone();
            zp.data[i] += eps;
            let mut zm = zin.clone();
            zm.data[i] -= eps;
            let fd = (dloss(&zp) - dloss(&zm)) / (2.0 * eps as f64);
            assert!((fd - dz.data[i] as f64).abs() < 2e-3 * (1.0 + fd.abs()), "dz[{i}] {fd} vs {}", dz.data[i]);
        }
    }

    #[test]
    fn empty_training_set_rejected() {
        assert!(matches!(train_autoencoder(Modality::Rgb, &[], &tiny(), |_| {}), Err(Error::InvalidArgument(_))));
    }
}
