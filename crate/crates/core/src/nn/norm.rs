use super::param::{Module, Param};
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;

/// Group normalization with a per-channel affine transform.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
}

impl GroupNorm {
    pub fn new(name: &str, groups: usize, channels: usize) -> Self {
        assert!(channels % groups == 0, "channels must divide into groups");
        GroupNorm {
            groups,
            channels,
            gamma: Param::filled(format!("{name}.gamma"), vec![channels], 1.0),
            beta: Param::zeros(format!("{name}.beta"), vec![channels]),
        }
    }

    /// (mean, 1/std) per (batch item, group).
    fn stats(&self, x: &Tensor) -> Vec<(f64, f64)> {
        let gsize = (self.channels / self.groups) * x.plane();
        x.data
            .chunks_exact(gsize)
            .map(|chunk| {
                let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / gsize as f64;
                let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / gsize as f64;
                (mean, 1.0 / (var + EPS).sqrt())
            })
            .collect()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.channels);
        let stats = self.stats(x);
        let cpg = self.channels / self.groups;
        let plane = x.plane();
        let mut y = x.clone();
        for (i, chunk) in y.data.chunks_exact_mut(plane).enumerate() {
            let c = i % self.channels;
            let (mean, inv) = stats[(i / self.channels) * self.groups + c / cpg];
            let (g, b) = (self.gamma.value[c] as f64, self.beta.value[c] as f64);
            for v in chunk.iter_mut() {
                *v = (((*v as f64 - mean) * inv) * g + b) as f32;
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let stats = self.stats(x);
        let cpg = self.channels / self.groups;
        let plane = x.plane();
        let gsize = cpg * plane;
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        for n in 0..x.n {
            for g in 0..self.groups {
                let (mean, inv) = stats[n * self.groups + g];
                let base = (n * self.channels + g * cpg) * plane;
                // sums of dxhat and dxhat * xhat over the group
                let mut s1 = 0.0f64;
                let mut s2 = 0.0f64;
                for cl in 0..cpg {
                    let c = g * cpg + cl;
                    let gam = self.gamma.value[c] as f64;
                    let mut dg = 0.0f64;
                    let mut db = 0.0f64;
                    for p in 0..plane {
                        let i = base + cl * plane + p;
                        let xhat = (x.data[i] as f64 - mean) * inv;
                        let d = dy.data[i] as f64;
                        dg += d * xhat;
                        db += d;
                        s1 += d * gam;
                        s2 += d * gam * xhat;
                    }
                    self.gamma.grad[c] += dg as f32;
                    self.beta.grad[c] += db as f32;
                }
                let m1 = s1 / gsize as f64;
                let m2 = s2 / gsize as f64;
                for cl in 0..cpg {
                    let c = g * cpg + cl;
                    let gam = self.gamma.value[c] as f64;
                    for p in 0..plane {
                        let i = base + cl * plane + p;
                        let xhat = (x.data[i] as f64 - mean) * inv;
                        let dxhat = dy.data[i] as f64 * gam;
                        dx.data[i] = (inv * (dxhat - m1 - xhat * m2)) as f32;
                    }
                }
            }
        }
        dx
    }
}

impl Module for GroupNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }
}
