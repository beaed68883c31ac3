//! Preprocessing from raw volumes to fixed-size network inputs in [-1, 1]
//! and one-hot 3-class labels.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::image::{BinaryMask, Grid, Image, LabelImage};
use crate::tensor::Tensor;
use crate::{shape_err, Error, Result};

/// A 3D scalar volume, axes ordered `[depth, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(shape_err!("volume {:?} from {} values", dims, data.len()));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config(alloc::format!("spacing {spacing_mm:?} must be positive")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateInput("volume contains non-finite values".into()));
        }
        Ok(Self {
            dims,
            spacing_mm,
            data,
        })
    }

    /// A single-slice volume.
    pub fn from_image(img: &Image, spacing_mm: [f64; 2]) -> Result<Self> {
        Self::new(
            [1, img.height, img.width],
            [1.0, spacing_mm[0], spacing_mm[1]],
            img.data.clone(),
        )
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    /// Slice `z` along the depth axis.
    pub fn slice(&self, z: usize) -> Image {
        let n = self.dims[1] * self.dims[2];
        Image {
            height: self.dims[1],
            width: self.dims[2],
            data: self.data[z * n..(z + 1) * n].to_vec(),
        }
    }

    pub fn slices(&self) -> Vec<Image> {
        (0..self.dims[0]).map(|z| self.slice(z)).collect()
    }

    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.data)
    }
}

fn mean_std(data: &[f64]) -> (f64, f64) {
    let n = data.len().max(1) as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Zero mean, unit (population) standard deviation.
pub fn standardize(vol: &Volume) -> Result<Volume> {
    let (mean, sd) = vol.mean_std();
    if !(sd > 0.0) || sd <= 1e-12 * mean.abs() {
        return Err(Error::DegenerateInput("volume has zero standard deviation".into()));
    }
    let data: Vec<f64> = vol.data.iter().map(|v| (v - mean) / sd).collect();
    // One correction pass removes the rounding residue of the first.
    let (m2, s2) = mean_std(&data);
    Ok(Volume {
        dims: vol.dims,
        spacing_mm: vol.spacing_mm,
        data: data.iter().map(|v| (v - m2) / s2).collect(),
    })
}

struct Axis {
    taps: Vec<(usize, usize, f64)>,
}

impl Axis {
    /// Output sample `i` sits at physical offset `i * to` from the first input
    /// voxel center; the output covers the input extent within one voxel.
    fn new(len: usize, from: f64, to: f64) -> Self {
        let extent = (len - 1) as f64 * from;
        let out_len = libm::floor(extent / to + 1e-9) as usize + 1;
        let taps = (0..out_len)
            .map(|i| {
                let c = (i as f64 * to / from).min((len - 1) as f64);
                let i0 = c as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, c - i0 as f64)
            })
            .collect();
        Self { taps }
    }
}

/// Trilinear resampling to `target_spacing_mm`. Single-slice volumes are
/// resampled bilinearly in-plane and keep their depth.
pub fn resample(vol: &Volume, target_spacing_mm: [f64; 3]) -> Result<Volume> {
    if target_spacing_mm.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config("target spacing must be positive".into()));
    }
    if target_spacing_mm == vol.spacing_mm {
        return Ok(vol.clone());
    }
    let mut target = target_spacing_mm;
    if vol.dims[0] == 1 {
        target[0] = vol.spacing_mm[0];
    }
    let axes: Vec<Axis> = (0..3)
        .map(|a| Axis::new(vol.dims[a], vol.spacing_mm[a], target[a]))
        .collect();
    let dims = [axes[0].taps.len(), axes[1].taps.len(), axes[2].taps.len()];
    let mut data = Vec::with_capacity(dims.iter().product());
    for &(z0, z1, fz) in &axes[0].taps {
        for &(y0, y1, fy) in &axes[1].taps {
            for &(x0, x1, fx) in &axes[2].taps {
                let plane = |z: usize| {
                    let row = |y: usize| vol.at(z, y, x0) * (1.0 - fx) + vol.at(z, y, x1) * fx;
                    row(y0) * (1.0 - fy) + row(y1) * fy
                };
                data.push(plane(z0) * (1.0 - fz) + plane(z1) * fz);
            }
        }
    }
    Volume::new(dims, target, data)
}

/// Nearest-neighbour counterpart of [`resample`] for masks.
pub fn resample_mask(mask: &BinaryMask, spacing_mm: [f64; 2], target_mm: [f64; 2]) -> BinaryMask {
    if spacing_mm == target_mm {
        return mask.clone();
    }
    let ay = Axis::new(mask.height, spacing_mm[0], target_mm[0]);
    let ax = Axis::new(mask.width, spacing_mm[1], target_mm[1]);
    let pick = |&(i0, i1, f): &(usize, usize, f64)| if f < 0.5 { i0 } else { i1 };
    Grid::from_fn(ay.taps.len(), ax.taps.len(), |y, x| {
        mask.at(pick(&ay.taps[y]), pick(&ax.taps[x]))
    })
}

/// A slice with values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSlice(Image);

impl NormalizedSlice {
    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    /// Wraps an image already in range; out-of-range values are an error.
    pub fn try_from_image(img: Image) -> Result<Self> {
        if img.data.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::DegenerateInput("values outside [-1, 1]".into()));
        }
        Ok(Self(img))
    }
}

/// Linear-interpolation percentile of sorted data (`pct` in [0, 100]).
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let i0 = libm::floor(pos) as usize;
    let i1 = (i0 + 1).min(sorted.len() - 1);
    let f = pos - i0 as f64;
    sorted[i0] + (sorted[i1] - sorted[i0]) * f
}

/// Clips to the `[lo_pct, hi_pct]` percentiles and maps that range onto
/// [-1, 1]. A zero-width interval yields an all-zero slice.
pub fn clip_normalize(img: &Image, lo_pct: f64, hi_pct: f64) -> Result<NormalizedSlice> {
    if !(0.0..100.0).contains(&lo_pct) || !(lo_pct < hi_pct && hi_pct <= 100.0) {
        return Err(Error::Config(alloc::format!(
            "percentiles must satisfy 0 <= lo < hi <= 100, got {lo_pct}, {hi_pct}"
        )));
    }
    if img.is_empty() {
        return Err(shape_err!("empty slice"));
    }
    let mut sorted = img.data.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let lo = percentile_sorted(&sorted, lo_pct);
    let hi = percentile_sorted(&sorted, hi_pct);
    if !(hi > lo) {
        log::warn!("clip_normalize: degenerate percentile interval [{lo}, {hi}], emitting zeros");
        return Ok(NormalizedSlice(img.map(|_| 0.0)));
    }
    let span = hi - lo;
    Ok(NormalizedSlice(img.map(|v| {
        let t = (v.clamp(lo, hi) - lo) / span;
        (2.0 * t - 1.0).clamp(-1.0, 1.0)
    })))
}

/// Symmetric padding with `pad_value` / centered cropping to `size × size`.
/// Odd differences put the extra row or column at the bottom/right.
pub fn pad_crop_image(img: &Image, size: usize, pad_value: f64) -> Image {
    let off = |len: usize| -> isize { (len as isize - size as isize).div_euclid(2) };
    let (oy, ox) = (off(img.height), off(img.width));
    Image::from_fn(size, size, |y, x| {
        let (sy, sx) = (y as isize + oy, x as isize + ox);
        if sy >= 0 && sx >= 0 && (sy as usize) < img.height && (sx as usize) < img.width {
            img.at(sy as usize, sx as usize)
        } else {
            pad_value
        }
    })
}

/// Grid version of [`pad_crop_image`] (masks pad with `T::default()`).
pub fn pad_crop_grid<T: Copy + Default>(g: &Grid<T>, size: usize) -> Grid<T> {
    let off = |len: usize| -> isize { (len as isize - size as isize).div_euclid(2) };
    let (oy, ox) = (off(g.height), off(g.width));
    Grid::from_fn(size, size, |y, x| {
        let (sy, sx) = (y as isize + oy, x as isize + ox);
        if sy >= 0 && sx >= 0 && (sy as usize) < g.height && (sx as usize) < g.width {
            g.at(sy as usize, sx as usize)
        } else {
            T::default()
        }
    })
}

pub fn pad_crop(slice: &NormalizedSlice, size: usize, pad_value: f64) -> Result<NormalizedSlice> {
    if size == 0 {
        return Err(Error::Config("pad/crop size must be positive".into()));
    }
    if !(-1.0..=1.0).contains(&pad_value) {
        return Err(Error::Config("pad value must lie in [-1, 1]".into()));
    }
    Ok(NormalizedSlice(pad_crop_image(&slice.0, size, pad_value)))
}

/// `3 × H × W` indicator planes for background, brain and vessel.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub const NUM_CLASSES: usize = 3;

pub fn one_hot(labels: &LabelImage) -> Result<OneHotMask> {
    labels.validate()?;
    let n = labels.len();
    let mut data = alloc::vec![0.0f32; NUM_CLASSES * n];
    for (i, &l) in labels.data.iter().enumerate() {
        data[l as usize * n + i] = 1.0;
    }
    Ok(OneHotMask {
        height: labels.height,
        width: labels.width,
        data,
    })
}

impl OneHotMask {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Per-pixel argmax (lowest index wins ties).
    pub fn argmax(&self) -> LabelImage {
        let n = self.height * self.width;
        Grid::from_fn(self.height, self.width, |y, x| {
            let i = y * self.width + x;
            let mut best = 0u8;
            for c in 1..NUM_CLASSES {
                if self.data[c * n + i] > self.data[best as usize * n + i] {
                    best = c as u8;
                }
            }
            best
        })
    }

    /// `[1, 3, H, W]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, NUM_CLASSES, self.height, self.width], self.data.clone()).unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocConfig {
    pub target_spacing_mm: [f64; 3],
    pub clip_lo_pct: f64,
    pub clip_hi_pct: f64,
    pub size: usize,
    pub pad_value: f64,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            target_spacing_mm: [0.5, 0.5, 0.5],
            clip_lo_pct: 0.5,
            clip_hi_pct: 99.5,
            size: 64,
            pad_value: -1.0,
        }
    }
}

/// Network-ready slices and labels of one input volume.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSlice {
    pub image: NormalizedSlice,
    pub labels: Option<LabelImage>,
}

/// Standardize, resample, slice, clip/normalize and pad/crop a volume, and
/// apply the matching geometric steps to its masks.
pub fn preprocess_volume(
    vol: &Volume,
    masks: Option<(&[BinaryMask], &[BinaryMask])>,
    cfg: &PreprocConfig,
) -> Result<Vec<PreparedSlice>> {
    let std = standardize(vol)?;
    let res = resample(&std, cfg.target_spacing_mm)?;
    let in_plane = [vol.spacing_mm[1], vol.spacing_mm[2]];
    let target_plane = [cfg.target_spacing_mm[1], cfg.target_spacing_mm[2]];
    let slices = res.slices();
    if let Some((brain, vessel)) = masks {
        if brain.len() != vol.dims[0] || vessel.len() != vol.dims[0] || vol.dims[0] != slices.len() {
            return Err(shape_err!("masks must be given per slice of an unresampled depth axis"));
        }
    }
    slices
        .iter()
        .enumerate()
        .map(|(z, s)| {
            let norm = clip_normalize(s, cfg.clip_lo_pct, cfg.clip_hi_pct)?;
            let image = pad_crop(&norm, cfg.size, cfg.pad_value)?;
            let labels = match masks {
                Some((brain, vessel)) => {
                    let b = pad_crop_grid(&resample_mask(&brain[z], in_plane, target_plane), cfg.size);
                    let v = pad_crop_grid(&resample_mask(&vessel[z], in_plane, target_plane), cfg.size);
                    Some(LabelImage::from_masks(&b, &v)?)
                }
                None => None,
            };
            Ok(PreparedSlice { image, labels })
        })
        .collect()
}

/// [`preprocess_volume`] for a single 2D slice at in-plane spacing `spacing_mm`.
pub fn preprocess_slice(
    img: &Image,
    spacing_mm: [f64; 2],
    masks: Option<(&BinaryMask, &BinaryMask)>,
    cfg: &PreprocConfig,
) -> Result<PreparedSlice> {
    let vol = Volume::from_image(img, spacing_mm)?;
    let owned = masks.map(|(b, v)| (alloc::vec![b.clone()], alloc::vec![v.clone()]));
    let m = owned.as_ref().map(|(b, v)| (b.as_slice(), v.as_slice()));
    let mut out = preprocess_volume(&vol, m, cfg)?;
    Ok(out.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn vol_from(values: Vec<f64>) -> Volume {
        let n = values.len();
        Volume::new([1, 1, n], [1.0, 1.0, 1.0], values).unwrap()
    }

    #[test]
    fn standardize_two_level_volume() {
        let v = standardize(&vol_from(vec![0.0, 2.0, 0.0, 2.0])).unwrap();
        assert_eq!(v.data, vec![-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn standardize_constant_is_degenerate() {
        assert!(matches!(
            standardize(&vol_from(vec![3.0; 8])),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn standardize_moments_and_idempotence() {
        let data: Vec<f64> = (0..1000).map(|i| libm::sin(i as f64 * 0.37) * 50.0 + 7.0 + i as f64 * 0.01).collect();
        let v = Volume::new([10, 10, 10], [1.0; 3], data).unwrap();
        let s = standardize(&v).unwrap();
        let (m, sd) = s.mean_std();
        assert!(m.abs() < 1e-6 && (sd - 1.0).abs() < 1e-6);
        let s2 = standardize(&s).unwrap();
        for (a, b) in s.data.iter().zip(&s2.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_identity_and_constant() {
        let v = Volume::new([2, 3, 4], [0.5; 3], (0..24).map(|i| i as f64).collect()).unwrap();
        assert_eq!(resample(&v, [0.5; 3]).unwrap(), v);
        let c = Volume::new([2, 3, 4], [1.0, 0.7, 0.3], vec![4.25; 24]).unwrap();
        let r = resample(&c, [0.5; 3]).unwrap();
        assert!(r.data.iter().all(|&x| x == 4.25));
    }

    #[test]
    fn resample_preserves_extent() {
        let v = Volume::new([3, 7, 5], [1.0, 0.8, 1.3], vec![1.0; 105]).unwrap();
        let r = resample(&v, [0.5; 3]).unwrap();
        for a in 0..3 {
            let before = (v.dims[a] - 1) as f64 * v.spacing_mm[a];
            let after = (r.dims[a] - 1) as f64 * r.spacing_mm[a];
            assert!(before - after >= -1e-9 && before - after < r.spacing_mm[a]);
        }
    }

    #[test]
    fn clip_normalize_full_range_is_affine() {
        let img = Image::from_vec(1, 3, vec![2.0, 5.0, 8.0]).unwrap();
        let n = clip_normalize(&img, 0.0, 100.0).unwrap();
        assert_eq!(n.image().data, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn clip_normalize_percentile_oracle() {
        let img = Image::from_fn(1, 100, |_, x| x as f64);
        let n = clip_normalize(&img, 1.0, 99.0).unwrap();
        // Sorted 0..99: rank 0.99 -> 0.99, rank 98.01 -> 98.01.
        let (lo, hi) = (0.99, 98.01);
        assert_eq!(n.image().at(0, 0), -1.0);
        assert_eq!(n.image().at(0, 99), 1.0);
        let expect = 2.0 * (50.0 - lo) / (hi - lo) - 1.0;
        assert!((n.image().at(0, 50) - expect).abs() < 1e-12);
        assert!((expect - 0.010307).abs() < 1e-6);
    }

    #[test]
    fn resample_reproduces_linear_ramp() {
        let (a, b) = (0.75, -2.0);
        let v = Volume::new([1, 3, 9], [1.0, 1.0, 1.0], (0..27).map(|i| a * (i % 9) as f64 + b).collect()).unwrap();
        let r = resample(&v, [1.0, 1.0, 0.5]).unwrap();
        assert_eq!(r.dims, [1, 3, 17]);
        for x in 0..17 {
            assert!((r.at(0, 1, x) - (a * x as f64 * 0.5 + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_normalize_degenerate_is_zero() {
        let img = Image::filled(2, 2, 5.0);
        let n = clip_normalize(&img, 1.0, 99.0).unwrap();
        assert!(n.image().data.iter().all(|&v| v == 0.0));
        assert!(clip_normalize(&img, 50.0, 50.0).is_err());
    }

    #[test]
    fn pad_crop_rules() {
        let img = Image::from_fn(6, 8, |y, x| (y * 10 + x) as f64 / 100.0);
        let s = NormalizedSlice::try_from_image(img.clone()).unwrap();
        assert_eq!(pad_crop(&s, 6, -1.0).unwrap().image().height, 6);
        let p = pad_crop(&NormalizedSlice::try_from_image(Image::filled(4, 6, 0.5)).unwrap(), 6, -1.0).unwrap();
        for x in 0..6 {
            assert_eq!(p.image().at(0, x), -1.0);
            assert_eq!(p.image().at(5, x), -1.0);
            assert_eq!(p.image().at(1, x), 0.5);
        }
    }

    #[test]
    fn one_hot_partition_and_argmax_roundtrip() {
        let l = LabelImage::from_vec(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let oh = one_hot(&l).unwrap();
        for i in 0..6 {
            let s: f32 = (0..3).map(|c| oh.channel(c)[i]).sum();
            assert_eq!(s, 1.0);
        }
        assert_eq!(oh.argmax(), l);
        let bad = LabelImage::from_vec(1, 1, vec![3]).unwrap();
        assert_eq!(one_hot(&bad), Err(Error::InvalidLabel(3)));
    }

    #[test]
    fn one_hot_single_vessel_pixel() {
        let mut l = LabelImage::new(2, 2);
        l.set(1, 0, 2);
        let oh = one_hot(&l).unwrap();
        let i = 2;
        assert_eq!([oh.channel(0)[i], oh.channel(1)[i], oh.channel(2)[i]], [0.0, 0.0, 1.0]);
        let bg = one_hot(&LabelImage::new(2, 2)).unwrap();
        assert!(bg.channel(0).iter().all(|&v| v == 1.0));
        assert!(bg.channel(1).iter().chain(bg.channel(2)).all(|&v| v == 0.0));
    }
}
