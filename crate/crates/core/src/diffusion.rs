//! DDPM machinery over latent grids: noise schedule, forward noising, the
//! reverse step, strided sampling and the denoiser training loop.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{insert_adam, load_adam, Checkpoint};
use crate::error::{invalid, Error, Result};
use crate::nn::{Adam, AdamConfig, Module};
use crate::pano::circular_shift;
use crate::tensor::Tensor;
use crate::unet::{UNet, UnetConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: ScheduleKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02, kind: ScheduleKind::Linear }
    }
}

/// Variance schedule. Index 0 holds the conventions `β_0 = 0`, `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return invalid("schedule needs at least one step");
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return invalid(format!("invalid beta range [{beta_start}, {beta_end}]"));
    }
    let mut betas = vec![0.0];
    match kind {
        ScheduleKind::Linear => {
            let span = (timesteps - 1).max(1) as f64;
            betas.extend((0..timesteps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / span));
        }
    }
    let mut alpha_bars = Vec::with_capacity(timesteps + 1);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { betas, alpha_bars })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end, cfg.kind)
    }

    /// Number of training steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `σ_t² = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return invalid(format!("timestep {t} outside 1..={}", self.steps()));
        }
        Ok(())
    }

    /// (1/√α, β/√(1−ᾱ_t), σ) for the reverse step `t → s`. For `s < t − 1`
    /// the jump uses the effective `α = ᾱ_t/ᾱ_s`.
    fn reverse_coefficients(&self, t: usize, s: usize) -> (f64, f64, f64) {
        let (abar_t, abar_s) = (self.alpha_bars[t], self.alpha_bars[s]);
        let (alpha, beta) = if s + 1 == t { (self.alpha(t), self.beta(t)) } else { (abar_t / abar_s, 1.0 - abar_t / abar_s) };
        let sigma = if s == 0 { 0.0 } else { (beta * (1.0 - abar_s) / (1.0 - abar_t)).sqrt() };
        (1.0 / alpha.sqrt(), beta / (1.0 - abar_t).sqrt(), sigma)
    }
}

/// `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    z0.ensure_same_shape(eps, "noise")?;
    let a = schedule.alpha_bar(t);
    let (ca, cb) = (a.sqrt() as f32, (1.0 - a).sqrt() as f32);
    Ok(z0.zip_map(eps, |z, e| ca * z + cb * e))
}

/// One reverse step `t → t−1`. `noise` is ignored at `t = 1`.
pub fn ddpm_step(z_t: &Tensor, eps_hat: &Tensor, t: usize, schedule: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    ddpm_step_to(z_t, eps_hat, t, t.saturating_sub(1), schedule, noise)
}

/// Reverse step from `t` to any earlier `t_prev`, as used by strided sampling.
/// Equals [`ddpm_step`] when `t_prev = t − 1`; `t_prev = 0` adds no noise.
pub fn ddpm_step_to(z_t: &Tensor, eps_hat: &Tensor, t: usize, t_prev: usize, schedule: &NoiseSchedule, noise: &Tensor) -> Result<Tensor> {
    schedule.check_t(t)?;
    if t_prev >= t {
        return invalid(format!("reverse step must go backwards, got {t} -> {t_prev}"));
    }
    z_t.ensure_same_shape(eps_hat, "predicted noise")?;
    z_t.ensure_same_shape(noise, "step noise")?;
    let (c1, c2, sigma) = schedule.reverse_coefficients(t, t_prev);
    let mut out = z_t.zip_map(eps_hat, |z, e| (c1 * (z as f64 - c2 * e as f64)) as f32);
    if sigma > 0.0 {
        let s = sigma as f32;
        out.data.iter_mut().zip(&noise.data).for_each(|(o, n)| *o += s * n);
    }
    Ok(out)
}

/// Strictly decreasing subsequence of training steps visited at inference.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepMap {
    steps: Vec<usize>,
}

impl StepMap {
    /// `count` evenly strided steps from `T` down to 1.
    pub fn strided(timesteps: usize, count: usize) -> Result<Self> {
        if count == 0 || count > timesteps {
            return invalid(format!("need 1 <= sampling steps <= {timesteps}, got {count}"));
        }
        if count == 1 {
            return Ok(StepMap { steps: vec![timesteps] });
        }
        let stride = (timesteps - 1) as f64 / (count - 1) as f64;
        let steps = (0..count).rev().map(|i| 1 + (i as f64 * stride).round() as usize).collect();
        Ok(StepMap { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `(t, t_prev)` pairs in sampling order; the last pair ends at 0.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps.iter().enumerate().map(|(i, &t)| (t, self.steps.get(i + 1).copied().unwrap_or(0)))
    }
}

/// Anything that predicts ε from a noisy latent batch at a shared timestep.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Tensor, t: usize) -> Tensor;
}

impl NoisePredictor for UNet {
    fn predict(&self, z_t: &Tensor, t: usize) -> Tensor {
        self.forward(z_t, &vec![t; z_t.n])
    }
}

/// Ancestral sampling from pure noise along `steps`. The latent has shape
/// `1 x c x h x w`; the same seed always gives the same result.
pub fn sample_unconditional(
    denoiser: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    steps: &StepMap,
    shape: [usize; 3],
    seed: u64,
) -> Result<Tensor> {
    let [c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Tensor::randn(1, c, h, w, &mut rng);
    for (t, t_prev) in steps.pairs() {
        let eps = denoiser.predict(&z, t);
        let noise = Tensor::randn(1, c, h, w, &mut rng);
        z = ddpm_step_to(&z, &eps, t, t_prev, schedule, &noise)?;
    }
    Ok(z)
}

/// Per-channel affine normalization applied to latents before diffusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl LatentStats {
    pub fn identity(channels: usize) -> Self {
        LatentStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    /// Channel statistics over a set of latents.
    pub fn fit(latents: &[Tensor]) -> Result<Self> {
        let Some(first) = latents.first() else {
            return invalid("cannot fit latent statistics on an empty set");
        };
        let c = first.c;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut count = 0usize;
        for z in latents {
            if z.c != c {
                return invalid("latents disagree on channel count");
            }
            let plane = z.plane();
            for (i, chunk) in z.data.chunks_exact(plane).enumerate() {
                sum[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
                sq[i % c] += chunk.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            }
            count += z.n * plane;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| ((s / count as f64 - m * m).max(0.0).sqrt().max(1e-4)) as f32).collect();
        Ok(LatentStats { mean: mean.into_iter().map(|m| m as f32).collect(), std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn apply(&self, z: &Tensor, f: impl Fn(f32, f32, f32) -> f32) -> Tensor {
        assert_eq!(z.c, self.channels(), "latent statistics channel mismatch");
        let mut out = z.clone();
        let plane = z.plane();
        for (i, chunk) in out.data.chunks_exact_mut(plane).enumerate() {
            let (m, s) = (self.mean[i % z.c], self.std[i % z.c]);
            chunk.iter_mut().for_each(|v| *v = f(*v, m, s));
        }
        out
    }

    pub fn normalize(&self, z: &Tensor) -> Tensor {
        self.apply(z, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, z: &Tensor) -> Tensor {
        self.apply(z, |v, m, s| v * s + m)
    }
}

/// Training data for the denoiser: normalized latents, one `1 x C x h x w`
/// tensor per panorama.
pub trait LatentSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Latent for item `i`. Sources may draw randomness, e.g. to sparsify depth.
    fn latent(&self, i: usize, rng: &mut ChaCha8Rng) -> Result<Tensor>;
}

impl LatentSource for Vec<Tensor> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn latent(&self, i: usize, _: &mut ChaCha8Rng) -> Result<Tensor> {
        Ok(self[i].clone())
    }
}

/// Depth sparsification applied to a training sample with some probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSparsity {
    pub probability: f64,
    /// Fraction of depth pixels zeroed when sparsifying.
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdmConfig {
    pub schedule: ScheduleConfig,
    pub sampling_steps: usize,
    pub unet: UnetConfig,
    /// Optimizer steps in total (a resumed run continues up to this count).
    pub train_steps: u64,
    pub batch_size: usize,
    pub lr: f32,
    /// Random circular shift of every training latent.
    pub rotation_augment: bool,
    /// Train on RGB and depth (4 channels) or RGB only (3 channels).
    pub use_depth: bool,
    pub depth_sparsity: Option<DepthSparsity>,
    pub seed: u64,
}

impl Default for LdmConfig {
    fn default() -> Self {
        LdmConfig {
            schedule: ScheduleConfig::default(),
            sampling_steps: 200,
            unet: UnetConfig::default(),
            train_steps: 3000,
            batch_size: 8,
            lr: 1e-3,
            rotation_augment: true,
            use_depth: true,
            depth_sparsity: None,
            seed: 0,
        }
    }
}

impl LdmConfig {
    pub fn latent_channels(&self) -> usize {
        if self.use_depth {
            4
        } else {
            3
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unet.in_channels != self.latent_channels() {
            return invalid(format!("denoiser has {} channels but the latent has {}", self.unet.in_channels, self.latent_channels()));
        }
        if self.batch_size == 0 {
            return invalid("batch size must be positive");
        }
        if let Some(s) = &self.depth_sparsity {
            if !(0.0..=1.0).contains(&s.probability) || !(0.0..=1.0).contains(&s.fraction) {
                return invalid("depth sparsity probability and fraction must lie in [0, 1]");
            }
        }
        NoiseSchedule::from_config(&self.schedule)?;
        StepMap::strided(self.schedule.timesteps, self.sampling_steps)?;
        Ok(())
    }
}

/// A trained latent diffusion model: denoiser, schedule and latent statistics.
#[derive(Clone, Debug)]
pub struct LatentDiffusion {
    pub config: LdmConfig,
    pub unet: UNet,
    pub schedule: NoiseSchedule,
    pub stats: LatentStats,
    /// Optimizer steps taken.
    pub step: u64,
}

impl LatentDiffusion {
    pub fn new(config: LdmConfig, stats: LatentStats) -> Result<Self> {
        config.validate()?;
        if stats.channels() != config.latent_channels() {
            return invalid("latent statistics do not match the latent channel count");
        }
        let unet = UNet::new(config.unet.clone(), config.seed);
        let schedule = NoiseSchedule::from_config(&config.schedule)?;
        Ok(LatentDiffusion { config, unet, schedule, stats, step: 0 })
    }

    pub fn step_map(&self) -> StepMap {
        StepMap::strided(self.schedule.steps(), self.config.sampling_steps).expect("validated at construction")
    }

    pub fn save_dir(&self, dir: &Path, adam: Option<&Adam>) -> Result<()> {
        let mut ckpt = Checkpoint::new("ldm", self.config.seed, serde_json::to_value(&self.config)?);
        ckpt.step = self.step;
        ckpt.extra = serde_json::json!({ "latent_stats": self.stats });
        ckpt.insert_module("", &self.unet);
        if let Some(adam) = adam {
            insert_adam(&mut ckpt, "", &self.unet.params(), adam);
        }
        ckpt.save(dir)
    }

    /// Loads a model and, when the checkpoint holds them, its optimizer moments.
    pub fn load_dir(dir: &Path) -> Result<(Self, Option<Adam>)> {
        let ckpt = Checkpoint::load(dir).map_err(|e| match e {
            Error::NotFound(p) => Error::InvalidState(format!("missing diffusion checkpoint ({p})")),
            other => other,
        })?;
        let config: LdmConfig = serde_json::from_value(ckpt.config.clone())?;
        let stats: LatentStats = serde_json::from_value(ckpt.extra["latent_stats"].clone())?;
        let mut model = LatentDiffusion::new(config, stats)?;
        ckpt.load_module("", &mut model.unet)?;
        model.step = ckpt.step;
        let adam = if ckpt.tensors.keys().any(|k| k.starts_with("adam.")) {
            let mut adam = Adam::new(AdamConfig { lr: model.config.lr, ..AdamConfig::default() }, &model.unet);
            load_adam(&ckpt, "", &model.unet.params(), &mut adam)?;
            Some(adam)
        } else {
            None
        };
        Ok((model, adam))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: u64,
    pub loss: f32,
}

/// Draws one training batch: `(z_t, ε, t)` for randomly chosen items.
fn training_batch(
    data: &dyn LatentSource,
    config: &LdmConfig,
    schedule: &NoiseSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let mut zs = Vec::with_capacity(config.batch_size);
    let mut eps = Vec::with_capacity(config.batch_size);
    let mut ts = Vec::with_capacity(config.batch_size);
    for _ in 0..config.batch_size {
        let i = rng.random_range(0..data.len());
        let mut z0 = data.latent(i, rng)?;
        if z0.c != config.latent_channels() {
            return invalid(format!("training latent has {} channels, expected {}", z0.c, config.latent_channels()));
        }
        if config.rotation_augment {
            z0 = circular_shift(&z0, rng.random_range(0..z0.w as i64));
        }
        let t = rng.random_range(1..=schedule.steps());
        let e = Tensor::randn(1, z0.c, z0.h, z0.w, rng);
        zs.push(q_sample(&z0, t, &e, schedule)?);
        eps.push(e);
        ts.push(t);
    }
    Ok((Tensor::stack(&zs)?, Tensor::stack(&eps)?, ts))
}

/// Mean squared ε-prediction error of `unet` on one batch, without updating it.
pub fn denoising_loss(unet: &UNet, z_t: &Tensor, eps: &Tensor, ts: &[usize]) -> f32 {
    let pred = unet.forward(z_t, ts);
    (pred.data.iter().zip(&eps.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / eps.len() as f64) as f32
}

/// Trains (or continues training) the denoiser until `config.train_steps`.
///
/// A fresh model starts from `LatentDiffusion::new`; resuming passes the
/// loaded model and optimizer. Batches are drawn from a stream seeded by
/// `(seed, step)`, so a resumed run sees the same data as an uninterrupted one.
pub fn train_ldm(
    model: &mut LatentDiffusion,
    adam: Option<Adam>,
    data: &dyn LatentSource,
    mut on_step: impl FnMut(&StepLoss),
) -> Result<Adam> {
    if data.is_empty() {
        return invalid("diffusion training needs a non-empty dataset");
    }
    let config = model.config.clone();
    let base_lr = config.lr;
    let mut adam = adam.unwrap_or_else(|| Adam::new(AdamConfig { lr: base_lr, ..AdamConfig::default() }, &model.unet));
    let total = config.train_steps.max(1) as f32;
    while model.step < config.train_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x1d_0000_0000 ^ model.step);
        let (z_t, eps, ts) = training_batch(data, &config, &model.schedule, &mut rng)?;
        let (pred, cache) = model.unet.forward_cached(&z_t, &ts);
        let count = eps.len() as f64;
        let loss = (pred.data.iter().zip(&eps.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / count) as f32;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("diffusion loss diverged at step {}", model.step)));
        }
        let dy = pred.zip_map(&eps, |a, b| (2.0 * (a - b) as f64 / count) as f32);
        model.unet.backward(&cache, &dy);
        let progress = model.step as f32 / total;
        adam.config.lr = base_lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos()));
        adam.step(&mut model.unet);
        model.step += 1;
        on_step(&StepLoss { step: model.step, loss });
    }
    Ok(adam)
}

/// The batch `train_ldm` would draw at `step`, for comparing models on an
/// identical stream.
pub fn batch_at(data: &dyn LatentSource, config: &LdmConfig, step: u64) -> Result<(Tensor, Tensor, Vec<usize>)> {
    let schedule = NoiseSchedule::from_config(&config.schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x1d_0000_0000 ^ step);
    training_batch(data, config, &schedule, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_schedule() -> NoiseSchedule {
        make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap()
    }

    #[test]
    fn first_alpha_bar_is_one_minus_beta() {
        let s = default_schedule();
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(1000) < s.alpha_bar(1));
    }

    #[test]
    fn alpha_bar_matches_log_sum() {
        let s = default_schedule();
        let log_sum: f64 = (0..1000).map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln()).sum();
        let expect = log_sum.exp();
        assert!(((s.alpha_bar(1000) - expect) / expect).abs() < 1e-10);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        for (t, a, b) in [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)] {
            assert!(matches!(make_schedule(t, a, b, ScheduleKind::Linear), Err(Error::InvalidArgument(_))));
        }
    }

    #[test]
    fn posterior_variance_within_beta() {
        let s = default_schedule();
        for t in 2..=1000 {
            let v = s.posterior_variance(t);
            assert!(v > 0.0 && v <= s.beta(t), "t={t}");
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn q_sample_limits() {
        let s = make_schedule(10, 1e-8, 1e-8, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z0 = Tensor::randn(1, 4, 2, 4, &mut rng);
        let eps = Tensor::randn(1, 4, 2, 4, &mut rng);
        assert!(q_sample(&z0, 1, &eps, &s).unwrap().max_abs_diff(&z0) < 1e-3);
        let d = default_schedule();
        let zt = q_sample(&z0, 500, &Tensor::zeros(1, 4, 2, 4), &d).unwrap();
        let ca = d.alpha_bar(500).sqrt() as f32;
        assert_eq!(zt, z0.map(|v| ca * v));
        assert!(matches!(q_sample(&z0, 1001, &eps, &d), Err(Error::InvalidArgument(_))));
        assert!(matches!(q_sample(&z0, 0, &eps, &d), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn q_sample_moments_match_closed_form() {
        let s = default_schedule();
        let t = 300;
        let z0 = 0.7f64;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z0t = Tensor::full(1, 1, 1, 1, z0 as f32);
        let draws: Vec<f64> = (0..n)
            .map(|_| q_sample(&z0t, t, &Tensor::randn(1, 1, 1, 1, &mut rng), &s).unwrap().data[0] as f64)
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (mu, sigma2) = (s.alpha_bar(t).sqrt() * z0, 1.0 - s.alpha_bar(t));
        assert!((mean - mu).abs() < 3.0 * (sigma2 / n as f64).sqrt());
        // standard error of the sample variance of a normal: σ²·√(2/(n−1))
        assert!((var - sigma2).abs() < 3.0 * sigma2 * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn final_step_is_deterministic() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::randn(1, 4, 16, 32, &mut rng);
        let e = Tensor::randn(1, 4, 16, 32, &mut rng);
        let a = ddpm_step(&z, &e, 1, &s, &Tensor::randn(1, 4, 16, 32, &mut rng)).unwrap();
        let b = ddpm_step(&z, &e, 1, &s, &Tensor::zeros(1, 4, 16, 32)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), [1, 4, 16, 32]);
        assert!(matches!(ddpm_step(&z, &e, 0, &s, &e), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn exact_noise_steps_toward_clean_signal() {
        let s = default_schedule();
        for t in [2usize, 50, 999] {
            let (z0, eps) = (0.8f64, -1.3f64);
            let zt = q_sample(&Tensor::full(1, 1, 1, 1, z0 as f32), t, &Tensor::full(1, 1, 1, 1, eps as f32), &s).unwrap();
            let out = ddpm_step(&zt, &Tensor::full(1, 1, 1, 1, eps as f32), t, &s, &Tensor::zeros(1, 1, 1, 1)).unwrap();
            // z_{t-1} = √ᾱ_{t-1} z0 + √α_t (1 − ᾱ_{t-1}) / √(1 − ᾱ_t) ε
            let (a, ab, ab_prev) = (s.alpha(t), s.alpha_bar(t), s.alpha_bar(t - 1));
            let expect = ab_prev.sqrt() * z0 + a.sqrt() * (1.0 - ab_prev) / (1.0 - ab).sqrt() * eps;
            assert!((out.data[0] as f64 - expect).abs() < 1e-5, "t={t}");
        }
    }

    #[test]
    fn strided_step_reduces_to_single_step() {
        let s = default_schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::randn(1, 2, 2, 2, &mut rng);
        let e = Tensor::randn(1, 2, 2, 2, &mut rng);
        let n = Tensor::randn(1, 2, 2, 2, &mut rng);
        assert_eq!(ddpm_step(&z, &e, 400, &s, &n).unwrap(), ddpm_step_to(&z, &e, 400, 399, &s, &n).unwrap());
        // a jump with exact ε and no noise lands on the clean marginal mean
        let z0 = Tensor::randn(1, 2, 2, 2, &mut rng);
        let zt = q_sample(&z0, 600, &e, &s).unwrap();
        let out = ddpm_step_to(&zt, &e, 600, 0, &s, &n).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-4);
    }

    #[test]
    fn step_map_endpoints() {
        let m = StepMap::strided(1000, 200).unwrap();
        assert_eq!(m.len(), 200);
        assert_eq!(m.steps()[0], 1000);
        assert_eq!(*m.steps().last().unwrap(), 1);
        assert!(m.steps().windows(2).all(|w| w[0] > w[1]));
        let pairs: Vec<_> = m.pairs().collect();
        assert_eq!(pairs.last(), Some(&(1, 0)));
        assert!(StepMap::strided(10, 11).is_err());
        assert_eq!(StepMap::strided(5, 5).unwrap().steps(), &[5, 4, 3, 2, 1]);
    }

    proptest! {
        #[test]
        fn step_maps_strictly_decrease(t in 2usize..2000, frac in 0.0f64..1.0) {
            let s = 2 + ((t - 2) as f64 * frac) as usize;
            let m = StepMap::strided(t, s).unwrap();
            prop_assert_eq!(m.len(), s);
            prop_assert_eq!(m.steps()[0], t);
            prop_assert_eq!(*m.steps().last().unwrap(), 1);
            prop_assert!(m.steps().windows(2).all(|w| w[0] > w[1]));
        }
    }

    #[test]
    fn latent_stats_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let zs: Vec<Tensor> = (0..4).map(|_| Tensor::randn(1, 3, 4, 8, &mut rng).map(|v| 2.0 * v + 1.0)).collect();
        let stats = LatentStats::fit(&zs).unwrap();
        let n = stats.normalize(&zs[0]);
        assert!(stats.denormalize(&n).max_abs_diff(&zs[0]) < 1e-5);
        let all: Vec<Tensor> = zs.iter().map(|z| stats.normalize(z)).collect();
        let refit = LatentStats::fit(&all).unwrap();
        for c in 0..3 {
            assert!(refit.mean[c].abs() < 1e-5 && (refit.std[c] - 1.0).abs() < 1e-4);
        }
    }

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict(&self, z: &Tensor, _: usize) -> Tensor {
            Tensor::zeros(z.n, z.c, z.h, z.w)
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let s = default_schedule();
        let m = StepMap::strided(1000, 20).unwrap();
        let a = sample_unconditional(&Zero, &s, &m, [4, 16, 32], 7).unwrap();
        let b = sample_unconditional(&Zero, &s, &m, [4, 16, 32], 7).unwrap();
        let c = sample_unconditional(&Zero, &s, &m, [4, 16, 32], 8).unwrap();
        assert_eq!(a.shape(), [1, 4, 16, 32]);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn mismatched_denoiser_config_is_rejected() {
        let cfg = LdmConfig { use_depth: false, ..LdmConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))));
    }
}
