//! Evaluation metrics: left-right consistency error, depth errors, a Fréchet
//! distance over seeded random convolutional features, density/coverage, and
//! the two-sample and paired tests used by the experiments.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{invalid, Error, Result};
use crate::nn::{Conv2d, Padding};
use crate::pano::Mask;
use crate::synth::rgb_to_u8;
use crate::tensor::Tensor;

/// Mean absolute difference between the first and last pixel columns, over
/// rows and channels, averaged over images. Images are in the 0-255 scale.
pub fn lrce(images: &[Tensor]) -> Result<f64> {
    if images.is_empty() {
        return invalid("lrce needs at least one image");
    }
    let mut total = 0.0;
    for img in images {
        let (h, w) = (img.h, img.w);
        let mut sum = 0.0;
        for n in 0..img.n {
            for c in 0..img.c {
                for y in 0..h {
                    sum += (img.at(n, c, y, 0) as f64 - img.at(n, c, y, w - 1) as f64).abs();
                }
            }
        }
        total += sum / (img.n * img.c * h) as f64;
    }
    Ok(total / images.len() as f64)
}

/// `[-1, 1]` RGB to the 8-bit value scale, quantized as when saved to PNG.
pub fn to_255(rgb: &Tensor) -> Tensor {
    rgb.map(|v| rgb_to_u8(v) as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthReport {
    pub rmse: f64,
    pub mae: f64,
    pub absrel: f64,
    pub delta125: f64,
    /// Valid pixels left out of `absrel` and `delta125` because `gt <= 0`.
    pub nonpositive_gt: usize,
}

pub fn depth_metrics(pred: &Tensor, gt: &Tensor, valid: &Mask) -> Result<DepthReport> {
    pred.ensure_same_shape(gt, "ground-truth depth")?;
    if pred.n != 1 || pred.c != 1 || (valid.h, valid.w) != (pred.h, pred.w) {
        return invalid("depth metrics expect 1x1xHxW maps and a matching mask");
    }
    let (mut sq, mut abs, mut rel, mut good) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    let (mut count, mut ratio_count, mut skipped) = (0usize, 0usize, 0usize);
    for ((&p, &g), &m) in pred.data.iter().zip(&gt.data).zip(valid.values()) {
        if m == 0 {
            continue;
        }
        let (p, g) = (p as f64, g as f64);
        count += 1;
        sq += (p - g).powi(2);
        abs += (p - g).abs();
        if g <= 0.0 {
            skipped += 1;
            continue;
        }
        ratio_count += 1;
        rel += (p - g).abs() / g;
        if p > 0.0 && (p / g).max(g / p) < 1.25 {
            good += 1;
        }
    }
    if count == 0 {
        return invalid("depth metrics need at least one valid pixel");
    }
    if skipped > 0 {
        log::warn!("{skipped} valid pixels with non-positive ground truth excluded from absrel/delta");
    }
    let per = |v: f64| if ratio_count == 0 { 0.0 } else { v / ratio_count as f64 };
    Ok(DepthReport {
        rmse: (sq / count as f64).sqrt(),
        mae: abs / count as f64,
        absrel: per(rel),
        delta125: per(good as f64),
        nonpositive_gt: skipped,
    })
}

/// PSNR in dB between two `[-1, 1]` images, optionally over visible pixels only.
pub fn psnr(a: &Tensor, b: &Tensor, mask: Option<&Mask>) -> Result<f64> {
    a.ensure_same_shape(b, "psnr reference")?;
    let plane = a.plane();
    let (mut se, mut count) = (0.0f64, 0usize);
    for (i, (x, y)) in a.data.iter().zip(&b.data).enumerate() {
        if let Some(m) = mask {
            if m.values()[i % plane] == 0 {
                continue;
            }
        }
        se += (((x - y) / 2.0) as f64).powi(2);
        count += 1;
    }
    if count == 0 {
        return invalid("psnr over an empty pixel set");
    }
    let mse = se / count as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

/// A fixed, randomly initialized convolutional feature map: three stride-2
/// circular 3x3 convolutions with ReLU, then global average pooling.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub seed: u64,
    pub dim: usize,
    convs: Vec<Conv2d>,
}

impl FeatureExtractor {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = [3, 16, 32, dim];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::new(&format!("feat{i}"), w[0], w[1], 3, 2, Padding::Circular, &mut rng))
            .collect();
        FeatureExtractor { seed, dim, convs }
    }

    pub fn id(&self) -> String {
        format!("randconv3-d{}-s{}", self.dim, self.seed)
    }

    /// One feature row per image (`1 x 3 x H x W`, values in `[-1, 1]`).
    pub fn extract(&self, images: &[Tensor]) -> Result<FeatureSet> {
        let mut rows = Vec::with_capacity(images.len());
        for img in images {
            if img.c != 3 {
                return invalid(format!("feature extractor expects RGB, got {} channels", img.c));
            }
            if let Some(first) = images.first() {
                if (img.h, img.w) != (first.h, first.w) {
                    return invalid("feature extraction needs images of one size");
                }
            }
            for n in 0..img.n {
                let mut x = img.item(n);
                for conv in &self.convs {
                    x = conv.forward(&x).map(|v| v.max(0.0));
                }
                let plane = x.plane() as f64;
                rows.push(x.data.chunks_exact(x.plane()).map(|c| c.iter().map(|&v| v as f64).sum::<f64>() / plane).collect());
            }
        }
        Ok(FeatureSet { extractor: self.id(), dim: self.dim, rows })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub extractor: String,
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn moments(&self, shrinkage: f64) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.rows.len(), self.dim);
        let mut mean = DVector::zeros(d);
        for r in &self.rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for r in &self.rows {
            let x = DVector::from_column_slice(r) - &mean;
            cov += &x * x.transpose();
        }
        cov /= (n.max(2) - 1) as f64;
        if shrinkage > 0.0 {
            let target = cov.trace() / d as f64;
            cov *= 1.0 - shrinkage;
            for i in 0..d {
                cov[(i, i)] += shrinkage * target;
            }
        }
        (mean, cov)
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`.
///
/// `shrinkage` in `[0, 1)` blends each covariance toward a scaled identity;
/// without it both sets need more rows than feature dimensions.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet, shrinkage: f64) -> Result<f64> {
    if a.extractor != b.extractor || a.dim != b.dim {
        return invalid(format!("feature sets come from different extractors ({} vs {})", a.extractor, b.extractor));
    }
    if !(0.0..1.0).contains(&shrinkage) {
        return invalid("shrinkage must lie in [0, 1)");
    }
    if a.len() < 2 || b.len() < 2 {
        return invalid("Fréchet distance needs at least two rows per set");
    }
    if shrinkage == 0.0 && (a.len() <= a.dim || b.len() <= b.dim) {
        return Err(Error::Numerical(format!(
            "covariance is singular with {} / {} rows for {} dimensions; use shrinkage",
            a.len(),
            b.len(),
            a.dim
        )));
    }
    if a.rows.iter().chain(&b.rows).any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("non-finite feature".into()));
    }
    let (ma, ca) = a.moments(shrinkage);
    let (mb, cb) = b.moments(shrinkage);
    let sa = sym_sqrt(&ca);
    let inner = &sa * &cb * &sa;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (ma - mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Density and coverage of `fake` with respect to `k`-NN balls around `real`.
pub fn density_coverage(real: &FeatureSet, fake: &FeatureSet, k: usize) -> Result<(f64, f64)> {
    if real.extractor != fake.extractor {
        return invalid("feature sets come from different extractors");
    }
    if k == 0 || k >= real.len() {
        return invalid(format!("k must lie in 1..{}, got {k}", real.len()));
    }
    if fake.is_empty() {
        return invalid("density/coverage needs generated features");
    }
    let radii: Vec<f64> = real
        .rows
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut d: Vec<f64> = real.rows.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, y)| dist(x, y)).collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1]
        })
        .collect();
    let mut inside = 0usize;
    let mut covered = vec![false; real.len()];
    for f in &fake.rows {
        for (i, (x, r)) in real.rows.iter().zip(&radii).enumerate() {
            if dist(f, x) <= *r {
                inside += 1;
                covered[i] = true;
            }
        }
    }
    let density = inside as f64 / (k * fake.len()) as f64;
    let coverage = covered.iter().filter(|&&c| c).count() as f64 / real.len() as f64;
    Ok((density, coverage))
}

/// Two-sample Kolmogorov-Smirnov test; returns `(D, p)` with the asymptotic
/// Kolmogorov distribution and the small-sample correction of Stephens.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return invalid("KS test needs two non-empty samples");
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    Ok((d, kolmogorov_q(lambda)))
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64).powi(2) * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    /// One-sided p-value for `mean(a − b) > 0`.
    pub p_value: f64,
}

/// Paired one-sided t-test of `H1: mean(a) > mean(b)`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() || a.len() < 2 {
        return invalid("paired t-test needs two equally long samples of at least 2");
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let (t, p) = if se == 0.0 {
        let p = if mean > 0.0 { 0.0 } else { 1.0 };
        (if mean > 0.0 { f64::INFINITY } else { 0.0 }, p)
    } else {
        let t = mean / se;
        let dist = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Numerical(e.to_string()))?;
        (t, 1.0 - dist.cdf(t))
    };
    Ok(PairedTest { n: a.len(), mean_diff: mean, t, p_value: p })
}
