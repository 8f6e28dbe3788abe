use rand::Rng;
use serde::{Deserialize, Serialize};

use super::param::{Module, Param};
use crate::tensor::Tensor;

/// Horizontal padding mode. Vertical padding is always zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Width axis wraps around, as on an equirectangular panorama.
    #[default]
    Circular,
    Zero,
}

/// Square-kernel 2-D convolution (odd kernel, "same" padding, stride 1 or 2,
/// optional dilation), lowered to one GEMM per batch item.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        let fan_in = cin * kernel * kernel;
        let bound = 1.0 / (fan_in as f32).sqrt();
        Conv2d {
            weight: Param::uniform(format!("{name}.weight"), vec![cout, cin, kernel, kernel], bound, rng),
            bias: Param::uniform(format!("{name}.bias"), vec![cout], bound, rng),
            cin,
            cout,
            kernel,
            stride,
            dilation: 1,
            padding,
        }
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        assert!(dilation >= 1);
        self.dilation = dilation;
        self
    }

    #[inline]
    fn pad(&self) -> isize {
        (self.dilation * (self.kernel / 2)) as isize
    }

    /// Zeroes weights and bias, e.g. for residual output projections.
    pub fn zero_init(mut self) -> Self {
        self.weight.value.fill(0.0);
        self.bias.value.fill(0.0);
        self
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1);
        let p = span / 2;
        ((h + 2 * p - span - 1) / self.stride + 1, (w + 2 * p - span - 1) / self.stride + 1)
    }

    /// Source column for output column `ox` and kernel tap `kx`, or `None` in zero padding.
    #[inline]
    fn src_col(&self, ox: usize, kx: usize, w: usize) -> Option<usize> {
        let ix = (ox * self.stride + kx * self.dilation) as isize - self.pad();
        match self.padding {
            Padding::Circular => Some(ix.rem_euclid(w as isize) as usize),
            Padding::Zero => (0..w as isize).contains(&ix).then_some(ix as usize),
        }
    }

    fn col_maps(&self, w: usize, wo: usize) -> Vec<Vec<Option<usize>>> {
        (0..self.kernel).map(|kx| (0..wo).map(|ox| self.src_col(ox, kx, w)).collect()).collect()
    }

    /// Column matrix `[cin*k*k, ho*wo]` for batch item `n`.
    fn im2col(&self, x: &Tensor, n: usize, maps: &[Vec<Option<usize>>], ho: usize, wo: usize, cols: &mut [f32]) {
        let p = ho * wo;
        let k = self.kernel;
        let pad = self.pad();
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_row = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..ho {
                        let dst = &mut dst_row[oy * wo..][..wo];
                        let iy = (oy * self.stride + ky * self.dilation) as isize - pad;
                        if iy < 0 || iy >= x.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x.data[x.idx(n, ci, iy as usize, 0)..][..x.w];
                        for (d, m) in dst.iter_mut().zip(&maps[kx]) {
                            *d = match m {
                                Some(ix) => src[*ix],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.cin, "{}: expected {} input channels", self.weight.name, self.cin);
        let (ho, wo) = self.out_dims(x.h, x.w);
        let p = ho * wo;
        let kk = self.cin * self.kernel * self.kernel;
        let maps = self.col_maps(x.w, wo);
        let mut cols = vec![0.0f32; kk * p];
        let mut y = Tensor::zeros(x.n, self.cout, ho, wo);
        for n in 0..x.n {
            let out = &mut y.data[n * self.cout * p..][..self.cout * p];
            for (co, row) in out.chunks_exact_mut(p).enumerate() {
                row.fill(self.bias.value[co]);
            }
            self.im2col(x, n, &maps, ho, wo, &mut cols);
            unsafe {
                matrixmultiply::sgemm(
                    self.cout,
                    kk,
                    p,
                    1.0,
                    self.weight.value.as_ptr(),
                    kk as isize,
                    1,
                    cols.as_ptr(),
                    p as isize,
                    1,
                    1.0,
                    out.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
        }
        y
    }

    /// Backpropagates `dy` for the forward input `x`; returns `dL/dx`.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let (ho, wo) = self.out_dims(x.h, x.w);
        assert_eq!((dy.n, dy.c, dy.h, dy.w), (x.n, self.cout, ho, wo));
        let p = ho * wo;
        let kk = self.cin * self.kernel * self.kernel;
        let k = self.kernel;
        let pad = self.pad();
        let maps = self.col_maps(x.w, wo);
        let mut cols = vec![0.0f32; kk * p];
        let mut dcols = vec![0.0f32; kk * p];
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        for n in 0..x.n {
            let dyn_ = &dy.data[n * self.cout * p..][..self.cout * p];
            for (co, row) in dyn_.chunks_exact(p).enumerate() {
                self.bias.grad[co] += row.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
            self.im2col(x, n, &maps, ho, wo, &mut cols);
            unsafe {
                // dW += dy · colsᵀ
                matrixmultiply::sgemm(
                    self.cout,
                    p,
                    kk,
                    1.0,
                    dyn_.as_ptr(),
                    p as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    p as isize,
                    1.0,
                    self.weight.grad.as_mut_ptr(),
                    kk as isize,
                    1,
                );
                // dcols = Wᵀ · dy
                matrixmultiply::sgemm(
                    kk,
                    self.cout,
                    p,
                    1.0,
                    self.weight.value.as_ptr(),
                    1,
                    kk as isize,
                    dyn_.as_ptr(),
                    p as isize,
                    1,
                    0.0,
                    dcols.as_mut_ptr(),
                    p as isize,
                    1,
                );
            }
            for ci in 0..self.cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let src_row = &dcols[row * p..(row + 1) * p];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky * self.dilation) as isize - pad;
                            if iy < 0 || iy >= x.h as isize {
                                continue;
                            }
                            let base = dx.idx(n, ci, iy as usize, 0);
                            let src = &src_row[oy * wo..][..wo];
                            for (s, m) in src.iter().zip(&maps[kx]) {
                                if let Some(ix) = m {
                                    dx.data[base + ix] += s;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pano::circular_shift;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct convolution by definition, in f64.
    fn naive(conv: &Conv2d, x: &Tensor) -> Vec<f64> {
        let (ho, wo) = conv.out_dims(x.h, x.w);
        let k = conv.kernel;
        let pad = (conv.dilation * (k / 2)) as isize;
        let d = conv.dilation;
        let mut out = Vec::new();
        for n in 0..x.n {
            for co in 0..conv.cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = conv.bias.value[co] as f64;
                        for ci in 0..conv.cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky * d) as isize - pad;
                                    let ix = (ox * conv.stride + kx * d) as isize - pad;
                                    if iy < 0 || iy >= x.h as isize {
                                        continue;
                                    }
                                    let ix = match conv.padding {
                                        Padding::Circular => ix.rem_euclid(x.w as isize),
                                        Padding::Zero if ix < 0 || ix >= x.w as isize => continue,
                                        Padding::Zero => ix,
                                    };
                                    let wv = conv.weight.value[((co * conv.cin + ci) * k + ky) * k + kx] as f64;
                                    acc += wv * x.at(n, ci, iy as usize, ix as usize) as f64;
                                }
                            }
                        }
                        out.push(acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, s, pad) in [(3, 1, Padding::Circular), (3, 2, Padding::Circular), (3, 1, Padding::Zero), (1, 1, Padding::Zero)] {
            let conv = Conv2d::new("c", 3, 5, k, s, pad, &mut rng);
            let x = Tensor::randn(2, 3, 6, 8, &mut rng);
            let y = conv.forward(&x);
            let expect = naive(&conv, &x);
            for (a, b) in y.data.iter().zip(&expect) {
                assert!((*a as f64 - b).abs() < 1e-5, "k={k} s={s}");
            }
        }
        let dilated = Conv2d::new("d", 2, 3, 3, 1, Padding::Circular, &mut rng).with_dilation(3);
        let x = Tensor::randn(1, 2, 7, 8, &mut rng);
        let y = dilated.forward(&x);
        assert_eq!(y.shape(), [1, 3, 7, 8]);
        for (a, b) in y.data.iter().zip(&naive(&dilated, &x)) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (s, pad, dil) in [(1, Padding::Circular, 1), (2, Padding::Circular, 1), (1, Padding::Zero, 1), (1, Padding::Circular, 2)] {
            let mut conv = Conv2d::new("c", 2, 3, 3, s, pad, &mut rng).with_dilation(dil);
            let x = Tensor::randn(2, 2, 4, 6, &mut rng);
            let y = conv.forward(&x);
            let g = Tensor::randn(y.n, y.c, y.h, y.w, &mut rng);
            let loss = |conv: &Conv2d, x: &Tensor| -> f64 {
                naive(conv, x).iter().zip(&g.data).map(|(a, b)| a * *b as f64).sum()
            };
            let dx = conv.backward(&x, &g);
            let eps = 1e-2;
            for i in (0..x.len()).step_by(5) {
                let mut xp = x.clone();
                xp.data[i] += eps;
                let mut xm = x.clone();
                xm.data[i] -= eps;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps as f64);
                assert!((fd - dx.data[i] as f64).abs() < 1e-3, "dx[{i}]: {fd} vs {}", dx.data[i]);
            }
            for i in (0..conv.weight.len()).step_by(3) {
                let mut cp = conv.clone();
                cp.weight.value[i] += eps;
                let mut cm = conv.clone();
                cm.weight.value[i] -= eps;
                let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps as f64);
                assert!((fd - conv.weight.grad[i] as f64).abs() < 1e-3, "dw[{i}]");
            }
            let db0: f64 = (0..y.n).flat_map(|n| (0..y.plane()).map(move |p| (n, p))).map(|(n, p)| g.data[n * y.item_len() + p] as f64).sum();
            assert!((conv.bias.grad[0] as f64 - db0).abs() < 1e-3);
        }
    }

    #[test]
    fn circular_conv_is_shift_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new("c", 3, 4, 3, 1, Padding::Circular, &mut rng);
        let strided = Conv2d::new("s", 3, 4, 3, 2, Padding::Circular, &mut rng);
        let x = Tensor::randn(1, 3, 8, 16, &mut rng);
        for k in [1i64, 5, -3] {
            let a = conv.forward(&circular_shift(&x, k));
            let b = circular_shift(&conv.forward(&x), k);
            assert!(a.max_abs_diff(&b) < 1e-6);
        }
        let a = strided.forward(&circular_shift(&x, 6));
        let b = circular_shift(&strided.forward(&x), 3);
        assert!(a.max_abs_diff(&b) < 1e-6);
    }
}
