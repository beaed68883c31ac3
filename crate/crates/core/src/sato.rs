//! Multiscale Hessian line filter (Sato) with Otsu or fixed thresholding.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::image::{BinaryMask, Grid, Image};
use crate::preproc::Volume;
use crate::synthgen::Polarity;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Otsu,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SatoConfig {
    pub scales_px: Vec<f64>,
    pub polarity: Polarity,
    /// Multiply each scale's response by σ².
    pub normalize: bool,
    pub threshold: Threshold,
    /// Eigenvalue asymmetry weights for same-sign and opposite-sign λ1.
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for SatoConfig {
    fn default() -> Self {
        Self {
            scales_px: geometric_scales(1.0, 4.0, 4),
            polarity: Polarity::Bright,
            normalize: true,
            threshold: Threshold::Otsu,
            alpha1: 0.5,
            alpha2: 2.0,
        }
    }
}

impl SatoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales_px.is_empty() || self.scales_px.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("sato scales must be positive".into()));
        }
        if self.scales_px.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("sato scales must be sorted ascending".into()));
        }
        if !(self.alpha1 > 0.0 && self.alpha2 > 0.0) {
            return Err(Error::Config("sato alpha values must be positive".into()));
        }
        Ok(())
    }
}

/// `n` scales spaced geometrically from `lo` to `hi`.
pub fn geometric_scales(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo * libm::pow(hi / lo, i as f64 / (n - 1) as f64))
        .collect()
}

/// Sampled Gaussian and its first two derivatives, radius `ceil(4σ)`.
///
/// The taps are normalised on the discrete grid so that constants, linear
/// and quadratic signals are differentiated exactly in the interior.
pub struct GaussKernels {
    pub g0: Vec<f64>,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
}

impl GaussKernels {
    pub fn new(sigma: f64) -> Self {
        let r = libm::ceil(4.0 * sigma) as isize;
        let s2 = sigma * sigma;
        let ks: Vec<f64> = (-r..=r).map(|k| k as f64).collect();
        let base: Vec<f64> = ks.iter().map(|k| libm::exp(-k * k / (2.0 * s2))).collect();
        let sum: f64 = base.iter().sum();
        let g0: Vec<f64> = base.iter().map(|b| b / sum).collect();
        let mut g1: Vec<f64> = ks.iter().zip(&g0).map(|(k, g)| -k / s2 * g).collect();
        let m1: f64 = ks.iter().zip(&g1).map(|(k, g)| -k * g).sum();
        g1.iter_mut().for_each(|v| *v /= m1);
        let mut g2: Vec<f64> = ks.iter().zip(&g0).map(|(k, g)| (k * k - s2) / (s2 * s2) * g).collect();
        let mean = g2.iter().sum::<f64>() / g2.len() as f64;
        g2.iter_mut().for_each(|v| *v -= mean);
        let m2: f64 = ks.iter().zip(&g2).map(|(k, g)| k * k * g).sum();
        g2.iter_mut().for_each(|v| *v *= 2.0 / m2);
        Self { g0, g1, g2 }
    }

    pub fn radius(&self) -> usize {
        self.g0.len() / 2
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * n as isize - 2;
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Convolves each 1D line along `axis` with `k` (`out[i] = Σ_m k[m+r] ·
/// in[i - m]`), reflecting at the borders. Zero-sum kernels are applied to
/// differences from the center sample so constants map to exact zeros.
fn filter_axis(data: &[f64], dims: &[usize], axis: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let zero_sum = k.iter().sum::<f64>().abs() < 1e-9;
    let n = dims[axis];
    let stride: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut out = vec![0.0; data.len()];
    let mut line = vec![0.0; n];
    for o in 0..outer {
        for s in 0..stride {
            let base = o * n * stride + s;
            for (i, v) in line.iter_mut().enumerate() {
                *v = data[base + i * stride];
            }
            for i in 0..n {
                let c = if zero_sum { line[i] } else { 0.0 };
                let mut acc = 0.0;
                for (j, &kv) in k.iter().enumerate() {
                    acc += kv * (line[reflect(i as isize - (j as isize - r), n)] - c);
                }
                out[base + i * stride] = acc;
            }
        }
    }
    out
}

/// Per-pixel Hessian `[[h_yy, h_yx], [h_xy, h_xx]]` of a 2D image.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianField2 {
    pub height: usize,
    pub width: usize,
    pub yy: Vec<f64>,
    pub xy: Vec<f64>,
    pub xx: Vec<f64>,
}

impl HessianField2 {
    pub fn at(&self, y: usize, x: usize) -> [[f64; 2]; 2] {
        let i = y * self.width + x;
        [[self.yy[i], self.xy[i]], [self.xy[i], self.xx[i]]]
    }
}

pub fn hessian2(img: &Image, sigma: f64) -> HessianField2 {
    let k = GaussKernels::new(sigma);
    let dims = [img.height, img.width];
    let along = |first: &[f64], second: &[f64]| {
        let a = filter_axis(&img.data, &dims, 0, first);
        filter_axis(&a, &dims, 1, second)
    };
    HessianField2 {
        height: img.height,
        width: img.width,
        yy: along(&k.g2, &k.g0),
        xy: along(&k.g1, &k.g1),
        xx: along(&k.g0, &k.g2),
    }
}

/// Eigenvalues of a symmetric 2×2 matrix sorted by `|λ1| <= |λ2|`.
pub fn eigen2(a: f64, b: f64, d: f64) -> (f64, f64) {
    let mean = 0.5 * (a + d);
    let diff = 0.5 * (a - d);
    let rad = libm::sqrt(diff * diff + b * b);
    let (e1, e2) = (mean - rad, mean + rad);
    if e1.abs() <= e2.abs() {
        (e1, e2)
    } else {
        (e2, e1)
    }
}

/// Bright-line measure for sorted eigenvalues (`|l1| <= |l2|`).
pub fn line_measure2(l1: f64, l2: f64, alpha1: f64, alpha2: f64) -> f64 {
    if l2 >= 0.0 {
        return 0.0;
    }
    let alpha = if l1 <= 0.0 { alpha1 } else { alpha2 };
    let q = l1 / (alpha * l2);
    -l2 * libm::exp(-0.5 * q * q)
}

fn oriented(img: &Image, polarity: Polarity) -> Image {
    match polarity {
        Polarity::Bright => img.clone(),
        Polarity::Dark => img.map(|v| -v),
    }
}

/// Line response at a single scale.
pub fn response_at_scale(img: &Image, sigma: f64, cfg: &SatoConfig) -> Image {
    let h = hessian2(&oriented(img, cfg.polarity), sigma);
    let norm = if cfg.normalize { sigma * sigma } else { 1.0 };
    let data = (0..h.yy.len())
        .map(|i| {
            let (l1, l2) = eigen2(h.yy[i], h.xy[i], h.xx[i]);
            norm * line_measure2(l1, l2, cfg.alpha1, cfg.alpha2)
        })
        .collect();
    Image {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Per-pixel maximum over scales.
pub fn vesselness(img: &Image, cfg: &SatoConfig) -> Result<Image> {
    cfg.validate()?;
    let mut best = Image::zeros(img.height, img.width);
    for &s in &cfg.scales_px {
        let r = response_at_scale(img, s, cfg);
        for (b, v) in best.data.iter_mut().zip(&r.data) {
            if *v > *b {
                *b = *v;
            }
        }
    }
    Ok(best)
}

/// Otsu threshold over a 256-bin histogram of `values`; returns `None` for
/// constant input.
pub fn otsu(values: &[f64]) -> Option<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return None;
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[(((v - lo) / width) as usize).min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let center = |i: usize| lo + (i as f64 + 0.5) * width;
    let sum_all: f64 = (0..BINS).map(|i| hist[i] as f64 * center(i)).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_t) = (-1.0, lo);
    for (i, &count) in hist.iter().enumerate().take(BINS - 1) {
        w0 += count as f64;
        sum0 += count as f64 * center(i);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = lo + (i + 1) as f64 * width;
        }
    }
    Some(best_t)
}

/// Thresholds the response (strictly greater than the threshold), restricted
/// to `brain` when given. Otsu is computed over the brain region.
pub fn segment_sato(img: &Image, cfg: &SatoConfig, brain: Option<&BinaryMask>) -> Result<BinaryMask> {
    let resp = vesselness(img, cfg)?;
    if let Some(b) = brain {
        if !img.same_shape(b) {
            return Err(crate::shape_err!("brain mask shape differs from image"));
        }
    }
    let inside = |i: usize| brain.is_none_or(|b| b.data[i]);
    let t = match cfg.threshold {
        Threshold::Fixed(t) => t,
        Threshold::Otsu => {
            let vals: Vec<f64> = (0..resp.len()).filter(|&i| inside(i)).map(|i| resp.data[i]).collect();
            match otsu(&vals) {
                Some(t) => t,
                None => return Ok(BinaryMask::new(img.height, img.width)),
            }
        }
    };
    Ok(Grid {
        height: img.height,
        width: img.width,
        data: (0..resp.len()).map(|i| inside(i) && resp.data[i] > t).collect(),
    })
}

/// Per-voxel symmetric 3×3 Hessian, entries ordered `zz, yy, xx, zy, zx, yx`.
pub struct HessianField3 {
    pub dims: [usize; 3],
    pub entries: [Vec<f64>; 6],
}

pub fn hessian3(vol: &Volume, sigma: f64) -> HessianField3 {
    let k = GaussKernels::new(sigma);
    let dims = vol.dims;
    let sep = |kz: &[f64], ky: &[f64], kx: &[f64]| {
        let a = filter_axis(&vol.data, &dims, 0, kz);
        let b = filter_axis(&a, &dims, 1, ky);
        filter_axis(&b, &dims, 2, kx)
    };
    HessianField3 {
        dims,
        entries: [
            sep(&k.g2, &k.g0, &k.g0),
            sep(&k.g0, &k.g2, &k.g0),
            sep(&k.g0, &k.g0, &k.g2),
            sep(&k.g1, &k.g1, &k.g0),
            sep(&k.g1, &k.g0, &k.g1),
            sep(&k.g0, &k.g1, &k.g1),
        ],
    }
}

/// Eigenvalues of a symmetric 3×3 matrix sorted by `|λ1| <= |λ2| <= |λ3|`.
pub fn eigen3(m: [f64; 6]) -> [f64; 3] {
    let [a, b, c, d, e, f] = m;
    // a=zz b=yy c=xx d=zy e=zx f=yx
    let p1 = d * d + e * e + f * f;
    let mut ev = if p1 == 0.0 {
        [a, b, c]
    } else {
        let q = (a + b + c) / 3.0;
        let p2 = (a - q) * (a - q) + (b - q) * (b - q) + (c - q) * (c - q) + 2.0 * p1;
        let p = libm::sqrt(p2 / 6.0);
        let (ba, bb, bc) = ((a - q) / p, (b - q) / p, (c - q) / p);
        let (bd, be, bf) = (d / p, e / p, f / p);
        let det = ba * (bb * bc - bf * bf) - bd * (bd * bc - bf * be) + be * (bd * bf - bb * be);
        let r = (det / 2.0).clamp(-1.0, 1.0);
        let phi = libm::acos(r) / 3.0;
        let e1 = q + 2.0 * p * libm::cos(phi);
        let e3 = q + 2.0 * p * libm::cos(phi + 2.0 * core::f64::consts::PI / 3.0);
        [e1, 3.0 * q - e1 - e3, e3]
    };
    ev.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    ev
}

/// 3D bright-line measure for sorted eigenvalues.
pub fn line_measure3(l: [f64; 3], alpha1: f64, alpha2: f64) -> f64 {
    let [l1, l2, l3] = l;
    if l2 >= 0.0 || l3 >= 0.0 {
        return 0.0;
    }
    let lc = libm::sqrt(l2 * l3);
    let alpha = if l1 <= 0.0 { alpha1 } else { alpha2 };
    let q = l1 / (alpha * lc);
    lc * libm::exp(-0.5 * q * q)
}

pub fn vesselness3(vol: &Volume, cfg: &SatoConfig) -> Result<Volume> {
    cfg.validate()?;
    let src = match cfg.polarity {
        Polarity::Bright => vol.clone(),
        Polarity::Dark => Volume {
            data: vol.data.iter().map(|v| -v).collect(),
            ..vol.clone()
        },
    };
    let mut best = vec![0.0; vol.data.len()];
    for &s in &cfg.scales_px {
        let h = hessian3(&src, s);
        let norm = if cfg.normalize { s * s } else { 1.0 };
        for (i, b) in best.iter_mut().enumerate() {
            let m = core::array::from_fn(|k| h.entries[k][i]);
            let v = norm * line_measure3(eigen3(m), cfg.alpha1, cfg.alpha2);
            if v > *b {
                *b = v;
            }
        }
    }
    Ok(Volume {
        dims: vol.dims,
        spacing_mm: vol.spacing_mm,
        data: best,
    })
}
