use rand::Rng;

use super::param::{Module, Param};
use crate::tensor::Tensor;

/// Fully connected layer over `n x c x 1 x 1` tensors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f32).sqrt();
        Linear {
            weight: Param::uniform(format!("{name}.weight"), vec![fan_out, fan_in], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), vec![fan_out], bound, rng),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.item_len(), self.fan_in);
        let mut y = Tensor::zeros(x.n, self.fan_out, 1, 1);
        for n in 0..x.n {
            let xi = &x.data[n * self.fan_in..][..self.fan_in];
            for o in 0..self.fan_out {
                let row = &self.weight.value[o * self.fan_in..][..self.fan_in];
                y.data[n * self.fan_out + o] = self.bias.value[o] + row.iter().zip(xi).map(|(a, b)| a * b).sum::<f32>();
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let mut dx = Tensor::zeros(x.n, self.fan_in, 1, 1);
        for n in 0..x.n {
            let xi = &x.data[n * self.fan_in..][..self.fan_in];
            for o in 0..self.fan_out {
                let d = dy.data[n * self.fan_out + o];
                self.bias.grad[o] += d;
                let row = o * self.fan_in;
                for i in 0..self.fan_in {
                    self.weight.grad[row + i] += d * xi[i];
                    dx.data[n * self.fan_in + i] += d * self.weight.value[row + i];
                }
            }
        }
        dx
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    x.zip_map(dy, |v, d| {
        let s = sigmoid(v);
        d * s * (1.0 + v * (1.0 - s))
    })
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2(x: &Tensor) -> Tensor {
    let (h2, w2) = (2 * x.h, 2 * x.w);
    let mut y = Tensor::zeros(x.n, x.c, h2, w2);
    for (src, dst) in x.data.chunks_exact(x.plane()).zip(y.data.chunks_exact_mut(h2 * w2)) {
        for yy in 0..h2 {
            let srow = &src[(yy / 2) * x.w..][..x.w];
            let drow = &mut dst[yy * w2..][..w2];
            for (xx, d) in drow.iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    y
}

pub fn upsample_nearest2_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for (src, dst) in dy.data.chunks_exact(dy.plane()).zip(dx.data.chunks_exact_mut(h * w)) {
        for yy in 0..dy.h {
            for xx in 0..dy.w {
                dst[(yy / 2) * w + xx / 2] += src[yy * dy.w + xx];
            }
        }
    }
    dx
}

/// Space-to-depth by 2: `c x h x w` becomes `4c x h/2 x w/2`, sub-pixel
/// `(dy, dx)` of channel `c` landing in channel `4c + 2dy + dx`.
pub fn pixel_unshuffle2(x: &Tensor) -> Tensor {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut y = Tensor::zeros(x.n, 4 * x.c, h, w);
    for n in 0..x.n {
        for c in 0..x.c {
            for yy in 0..x.h {
                for xx in 0..x.w {
                    let oc = 4 * c + 2 * (yy % 2) + xx % 2;
                    let o = y.idx(n, oc, yy / 2, xx / 2);
                    y.data[o] = x.at(n, c, yy, xx);
                }
            }
        }
    }
    y
}

/// Depth-to-space by 2, the inverse of [`pixel_unshuffle2`].
pub fn pixel_shuffle2(x: &Tensor) -> Tensor {
    let c = x.c / 4;
    let mut y = Tensor::zeros(x.n, c, 2 * x.h, 2 * x.w);
    for n in 0..x.n {
        for ch in 0..c {
            for yy in 0..2 * x.h {
                for xx in 0..2 * x.w {
                    let ic = 4 * ch + 2 * (yy % 2) + xx % 2;
                    let o = y.idx(n, ch, yy, xx);
                    y.data[o] = x.at(n, ic, yy / 2, xx / 2);
                }
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut lin = Linear::new("l", 4, 3, &mut rng);
        let x = Tensor::randn(2, 4, 1, 1, &mut rng);
        let g = Tensor::randn(2, 3, 1, 1, &mut rng);
        let loss = |l: &Linear, x: &Tensor| -> f64 { l.forward(x).data.iter().zip(&g.data).map(|(a, b)| (*a * *b) as f64).sum() };
        let dx = lin.backward(&x, &g);
        let eps = 1e-2;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * eps as f64);
            assert!((fd - dx.data[i] as f64).abs() < 1e-3);
        }
        let mut lp = lin.clone();
        lp.weight.value[5] += eps;
        let mut lm = lin.clone();
        lm.weight.value[5] -= eps;
        let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps as f64);
        assert!((fd - lin.weight.grad[5] as f64).abs() < 1e-3);
    }

    #[test]
    fn silu_gradient() {
        let x = Tensor::from_vec(1, 1, 1, 4, vec![-2.0, -0.1, 0.4, 3.0]).unwrap();
        let ones = Tensor::full(1, 1, 1, 4, 1.0);
        let d = silu_backward(&x, &ones);
        for i in 0..4 {
            let f = |v: f32| v as f64 / (1.0 + (-(v as f64)).exp());
            let fd = (f(x.data[i] + 1e-3) - f(x.data[i] - 1e-3)) / 2e-3;
            assert!((fd - d.data[i] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn shuffle_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn(2, 3, 4, 6, &mut rng);
        let u = pixel_unshuffle2(&x);
        assert_eq!(u.shape(), [2, 12, 2, 3]);
        assert_eq!(pixel_shuffle2(&u), x);
    }

    #[test]
    fn upsample_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn(1, 2, 3, 4, &mut rng);
        let g = Tensor::randn(1, 2, 6, 8, &mut rng);
        let lhs: f32 = upsample_nearest2(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.data.iter().zip(&upsample_nearest2_backward(&g).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
