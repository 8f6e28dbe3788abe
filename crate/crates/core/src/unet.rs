//! ε-prediction U-Net over latent grids.
//!
//! The network never resamples: the contracting path grows its receptive
//! field with dilated convolutions instead of strided ones, and the expanding
//! path mirrors it with skip connections. With circular width padding every
//! layer commutes with circular shifts by any number of latent columns.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{silu, silu_backward, Conv2d, GroupNorm, Linear, Module, Padding, Param};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnetConfig {
    /// Latent channels in and out (4 for RGB-D, 3 for RGB only).
    pub in_channels: usize,
    /// Feature widths of the outer and inner level.
    pub widths: [usize; 2],
    /// Length of the sinusoidal timestep encoding.
    pub time_dim: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig { in_channels: 4, widths: [32, 48], time_dim: 64, groups: 8, padding: Padding::Circular }
    }
}

/// Sinusoidal encoding of integer timesteps, `n x dim x 1 x 1`.
pub fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Tensor::zeros(ts.len(), dim, 1, 1);
    for (n, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out.data[n * dim + i] = arg.sin() as f32;
            out.data[n * dim + half + i] = arg.cos() as f32;
        }
    }
    out
}

/// Adds `bias[n, c]` to every pixel of channel `c` in item `n`.
fn add_channel_bias(x: &mut Tensor, bias: &Tensor) {
    let plane = x.plane();
    for (i, chunk) in x.data.chunks_exact_mut(plane).enumerate() {
        let b = bias.data[i];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn sum_planes(x: &Tensor) -> Tensor {
    let plane = x.plane();
    let data = x.data.chunks_exact(plane).map(|c| c.iter().sum()).collect();
    Tensor { n: x.n, c: x.c, h: 1, w: 1, data }
}

/// Pre-activation residual block with an additive timestep projection.
#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

struct ResCache {
    x: Tensor,
    h1: Tensor,
    a1: Tensor,
    c1: Tensor,
    h2: Tensor,
    a2: Tensor,
}

impl ResBlock {
    fn new(name: &str, cin: usize, cout: usize, tdim: usize, dilation: usize, cfg: &UnetConfig, rng: &mut ChaCha8Rng) -> Self {
        let pad = cfg.padding;
        ResBlock {
            norm1: GroupNorm::new(&format!("{name}.norm1"), cfg.groups, cin),
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, 1, pad, rng).with_dilation(dilation),
            time: Linear::new(&format!("{name}.time"), tdim, cout, rng),
            norm2: GroupNorm::new(&format!("{name}.norm2"), cfg.groups, cout),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, pad, rng).with_dilation(dilation).zero_init(),
            skip: (cin != cout).then(|| Conv2d::new(&format!("{name}.skip"), cin, cout, 1, 1, pad, rng)),
        }
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> (Tensor, ResCache) {
        let h1 = self.norm1.forward(x);
        let a1 = silu(&h1);
        let mut c1 = self.conv1.forward(&a1);
        add_channel_bias(&mut c1, &self.time.forward(temb));
        let h2 = self.norm2.forward(&c1);
        let a2 = silu(&h2);
        let mut y = self.conv2.forward(&a2);
        match &self.skip {
            Some(s) => y.add_assign(&s.forward(x)),
            None => y.add_assign(x),
        }
        (y, ResCache { x: x.clone(), h1, a1, c1, h2, a2 })
    }

    /// Returns (dx, d temb).
    fn backward(&mut self, cache: &ResCache, temb: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
        let da2 = self.conv2.backward(&cache.a2, dy);
        let dh2 = silu_backward(&cache.h2, &da2);
        let dc1 = self.norm2.backward(&cache.c1, &dh2);
        let dtemb = self.time.backward(temb, &sum_planes(&dc1));
        let da1 = self.conv1.backward(&cache.a1, &dc1);
        let dh1 = silu_backward(&cache.h1, &da1);
        let mut dx = self.norm1.backward(&cache.x, &dh1);
        match &mut self.skip {
            Some(s) => dx.add_assign(&s.backward(&cache.x, dy)),
            None => dx.add_assign(dy),
        }
        (dx, dtemb)
    }

    fn modules(&self) -> Vec<&dyn Module> {
        let mut m: Vec<&dyn Module> = vec![&self.norm1, &self.conv1, &self.time, &self.norm2, &self.conv2];
        if let Some(s) = &self.skip {
            m.push(s);
        }
        m
    }

    fn modules_mut(&mut self) -> Vec<&mut dyn Module> {
        let mut m: Vec<&mut dyn Module> = vec![&mut self.norm1, &mut self.conv1, &mut self.time, &mut self.norm2, &mut self.conv2];
        if let Some(s) = &mut self.skip {
            m.push(s);
        }
        m
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UnetConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down0: ResBlock,
    down1: ResBlock,
    mid: ResBlock,
    up1: ResBlock,
    up0: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

/// Activations kept for the backward pass.
pub struct UnetCache {
    t_raw: Tensor,
    t_hidden: Tensor,
    temb: Tensor,
    x_in: Tensor,
    blocks: Vec<ResCache>,
    h_out: Tensor,
    u0: Tensor,
}

impl UNet {
    pub fn new(config: UnetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w0, w1] = config.widths;
        let tdim = 4 * w0;
        let pad = config.padding;
        UNet {
            time1: Linear::new("time1", config.time_dim, tdim, &mut rng),
            time2: Linear::new("time2", tdim, tdim, &mut rng),
            conv_in: Conv2d::new("conv_in", config.in_channels, w0, 3, 1, pad, &mut rng),
            down0: ResBlock::new("down0", w0, w0, tdim, 1, &config, &mut rng),
            down1: ResBlock::new("down1", w0, w1, tdim, 2, &config, &mut rng),
            mid: ResBlock::new("mid", w1, w1, tdim, 4, &config, &mut rng),
            up1: ResBlock::new("up1", 2 * w1, w1, tdim, 2, &config, &mut rng),
            up0: ResBlock::new("up0", w1 + w0, w0, tdim, 1, &config, &mut rng),
            norm_out: GroupNorm::new("norm_out", config.groups, w0),
            conv_out: Conv2d::new("conv_out", w0, config.in_channels, 3, 1, pad, &mut rng).zero_init(),
            config,
        }
    }

    /// Predicts the noise in `z` at per-item timesteps `ts`.
    pub fn forward_cached(&self, z: &Tensor, ts: &[usize]) -> (Tensor, UnetCache) {
        assert_eq!(z.c, self.config.in_channels, "denoiser expects {} channels", self.config.in_channels);
        assert_eq!(ts.len(), z.n, "one timestep per batch item");
        let t_raw = timestep_embedding(ts, self.config.time_dim);
        let t_hidden = self.time1.forward(&t_raw);
        let temb = silu(&self.time2.forward(&silu(&t_hidden)));

        let h0 = self.conv_in.forward(z);
        let (s0, c0) = self.down0.forward(&h0, &temb);
        let (s1, c1) = self.down1.forward(&s0, &temb);
        let (m, c2) = self.mid.forward(&s1, &temb);
        let cat1 = Tensor::concat_channels(&m, &s1).expect("same spatial size");
        let (u1, c3) = self.up1.forward(&cat1, &temb);
        let cat0 = Tensor::concat_channels(&u1, &s0).expect("same spatial size");
        let (u0, c4) = self.up0.forward(&cat0, &temb);
        let h_out = self.norm_out.forward(&u0);
        let y = self.conv_out.forward(&silu(&h_out));
        let cache = UnetCache { t_raw, t_hidden, temb, x_in: z.clone(), blocks: vec![c0, c1, c2, c3, c4], h_out, u0 };
        (y, cache)
    }

    pub fn forward(&self, z: &Tensor, ts: &[usize]) -> Tensor {
        self.forward_cached(z, ts).0
    }

    /// Accumulates parameter gradients for loss gradient `dy`.
    pub fn backward(&mut self, cache: &UnetCache, dy: &Tensor) {
        let [w0, w1] = self.config.widths;
        let a_out = silu(&cache.h_out);
        let da = self.conv_out.backward(&a_out, dy);
        let du0 = self.norm_out.backward(&cache.u0, &silu_backward(&cache.h_out, &da));
        let temb = &cache.temb;
        let mut dtemb = Tensor::zeros(temb.n, temb.c, 1, 1);

        let (dcat0, dt) = self.up0.backward(&cache.blocks[4], temb, &du0);
        dtemb.add_assign(&dt);
        let du1 = dcat0.channels(0, w1);
        let mut ds0 = dcat0.channels(w1, w0);
        let (dcat1, dt) = self.up1.backward(&cache.blocks[3], temb, &du1);
        dtemb.add_assign(&dt);
        let dm = dcat1.channels(0, w1);
        let mut ds1 = dcat1.channels(w1, w1);
        let (dx, dt) = self.mid.backward(&cache.blocks[2], temb, &dm);
        dtemb.add_assign(&dt);
        ds1.add_assign(&dx);
        let (dx, dt) = self.down1.backward(&cache.blocks[1], temb, &ds1);
        dtemb.add_assign(&dt);
        ds0.add_assign(&dx);
        let (dh0, dt) = self.down0.backward(&cache.blocks[0], temb, &ds0);
        dtemb.add_assign(&dt);
        self.conv_in.backward(&cache.x_in, &dh0);

        let pre2 = self.time2.forward(&silu(&cache.t_hidden));
        let d_pre2 = silu_backward(&pre2, &dtemb);
        let d_act1 = self.time2.backward(&silu(&cache.t_hidden), &d_pre2);
        let d_hidden = silu_backward(&cache.t_hidden, &d_act1);
        self.time1.backward(&cache.t_raw, &d_hidden);
    }

    fn blocks(&self) -> [&ResBlock; 5] {
        [&self.down0, &self.down1, &self.mid, &self.up1, &self.up0]
    }
}

impl Module for UNet {
    fn params(&self) -> Vec<&Param> {
        let mut mods: Vec<&dyn Module> = vec![&self.time1, &self.time2, &self.conv_in];
        for b in self.blocks() {
            mods.extend(b.modules());
        }
        mods.extend([&self.norm_out as &dyn Module, &self.conv_out]);
        mods.into_iter().flat_map(|m| m.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut mods: Vec<&mut dyn Module> = vec![&mut self.time1, &mut self.time2, &mut self.conv_in];
        for b in [&mut self.down0, &mut self.down1, &mut self.mid, &mut self.up1, &mut self.up0] {
            mods.extend(b.modules_mut());
        }
        mods.push(&mut self.norm_out);
        mods.push(&mut self.conv_out);
        mods.into_iter().flat_map(|m| m.params_mut()).collect()
    }
}
