//! Dense `f32` tensors in NCHW layout.
//!
//! Single images and latent grids are stored channels-first with `n == 1`;
//! the width axis is always the innermost (fastest varying) one, which is
//! the axis that wraps around on an equirectangular panorama.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self::full(n, c, h, w, 0.0)
    }

    pub fn full(n: usize, c: usize, h: usize, w: usize, v: f32) -> Self {
        Tensor { n, c, h, w, data: vec![v; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return invalid(format!(
                "tensor data length {} does not match shape {}x{}x{}x{}",
                data.len(),
                n,
                c,
                h,
                w
            ));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn randn<R: Rng + ?Sized>(n: usize, c: usize, h: usize, w: usize, rng: &mut R) -> Self {
        let data = (0..n * c * h * w).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        Tensor { n, c, h, w, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(n, c, y, x)]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape() == other.shape()
    }

    pub fn ensure_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            invalid(format!("{what}: shape {:?} vs {:?}", self.shape(), other.shape()))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { n: self.n, c: self.c, h: self.h, w: self.w, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        debug_assert!(self.same_shape(other));
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { n: self.n, c: self.c, h: self.h, w: self.w, data }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Batch item `i` as its own tensor with `n == 1`.
    pub fn item(&self, i: usize) -> Tensor {
        let len = self.item_len();
        Tensor {
            n: 1,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data[i * len..(i + 1) * len].to_vec(),
        }
    }

    /// Stacks tensors of identical (c, h, w) along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = match items.first() {
            Some(f) => f,
            None => return invalid("cannot stack an empty list"),
        };
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        let mut n = 0;
        for t in items {
            if (t.c, t.h, t.w) != (first.c, first.h, first.w) {
                return invalid("stack: mismatched item shapes");
            }
            data.extend_from_slice(&t.data);
            n += t.n;
        }
        Ok(Tensor { n, c: first.c, h: first.h, w: first.w, data })
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
            return invalid("concat_channels: mismatched n/h/w");
        }
        let (pa, pb) = (a.item_len(), b.item_len());
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..a.n {
            data.extend_from_slice(&a.data[i * pa..(i + 1) * pa]);
            data.extend_from_slice(&b.data[i * pb..(i + 1) * pb]);
        }
        Ok(Tensor { n: a.n, c: a.c + b.c, h: a.h, w: a.w, data })
    }

    /// Channels `[start, start + count)`.
    pub fn channels(&self, start: usize, count: usize) -> Tensor {
        assert!(start + count <= self.c, "channel range out of bounds");
        let plane = self.plane();
        let mut data = Vec::with_capacity(self.n * count * plane);
        for i in 0..self.n {
            let base = (i * self.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + count * plane]);
        }
        Tensor { n: self.n, c: count, h: self.h, w: self.w, data }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.len().max(1) as f64
    }
}
