//! PNG rendering: grayscale slices, intensity projections and label overlays
//! (brain red, vessels green).

use std::path::Path;

use anyhow::{ensure, Context, Result};
use image::{GrayImage, Luma, Rgb, RgbImage};
use vesselda_core::image::{Image, LabelImage};

/// Maximum intensity projection over a stack of equally sized slices.
pub fn mip(slices: &[Image]) -> Result<Image> {
    project(slices, f64::max)
}

/// Minimum intensity projection.
pub fn min_ip(slices: &[Image]) -> Result<Image> {
    project(slices, f64::min)
}

fn project(slices: &[Image], f: fn(f64, f64) -> f64) -> Result<Image> {
    let first = slices.first().context("projection of an empty stack")?;
    ensure!(
        slices.iter().all(|s| s.height == first.height && s.width == first.width),
        "projection over slices of different sizes"
    );
    let mut out = first.clone();
    for s in &slices[1..] {
        for (o, &v) in out.data.iter_mut().zip(&s.data) {
            *o = f(*o, v);
        }
    }
    Ok(out)
}

fn to_u8(v: f64, lo: f64, hi: f64) -> u8 {
    if hi > lo {
        (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
    } else {
        0
    }
}

/// 8-bit grayscale with the image's own min/max stretched to 0..255.
pub fn gray(img: &Image) -> GrayImage {
    let (lo, hi) = (img.min(), img.max());
    GrayImage::from_fn(img.width as u32, img.height as u32, |x, y| Luma([to_u8(img.at(y as usize, x as usize), lo, hi)]))
}

/// Grayscale background with brain pixels tinted red and vessel pixels green.
pub fn overlay(img: &Image, labels: &LabelImage) -> Result<RgbImage> {
    ensure!(img.height == labels.height && img.width == labels.width, "overlay size mismatch");
    let g = gray(img);
    Ok(RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        let v = g.get_pixel(x, y)[0] as f64;
        let mix = |a: f64, b: f64| (0.5 * a + 0.5 * b).round() as u8;
        match labels.at(y as usize, x as usize) {
            2 => Rgb([mix(v, 0.0), mix(v, 255.0), mix(v, 0.0)]),
            1 => Rgb([mix(v, 255.0), (v * 0.6) as u8, (v * 0.6) as u8]),
            _ => Rgb([v as u8; 3]),
        }
    }))
}

/// Images side by side, each stretched independently, with a 2 px gap.
pub fn strip(images: &[Image]) -> Result<GrayImage> {
    let first = images.first().context("empty strip")?;
    let (h, w) = (first.height as u32, first.width as u32);
    let mut out = GrayImage::new((w + 2) * images.len() as u32 - 2, h);
    for (i, img) in images.iter().enumerate() {
        ensure!(img.height as u32 == h && img.width as u32 == w, "strip images differ in size");
        image::imageops::replace(&mut out, &gray(img), (i as u32 * (w + 2)) as i64, 0);
    }
    Ok(out)
}

pub fn save_gray(path: &Path, img: &GrayImage) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projections() {
        let c = Image::filled(3, 3, 2.5);
        assert_eq!(mip(&[c.clone(), c.clone()]).unwrap(), c);
        assert_eq!(min_ip(std::slice::from_ref(&c)).unwrap(), c);
        let a = Image::from_fn(2, 2, |y, x| (y * 2 + x) as f64);
        let b = Image::from_fn(2, 2, |y, x| 3.0 - (y * 2 + x) as f64);
        let (hi, lo) = (mip(&[a.clone(), b.clone()]).unwrap(), min_ip(&[a, b]).unwrap());
        assert!(hi.data.iter().zip(&lo.data).all(|(h, l)| h >= l));
        assert!(mip(&[]).is_err());
    }

    #[test]
    fn overlay_colors() {
        let img = Image::filled(1, 3, 0.0);
        let lab = LabelImage::from_vec(1, 3, vec![0, 1, 2]).unwrap();
        let o = overlay(&img, &lab).unwrap();
        assert_eq!(o.get_pixel(0, 0).0, [0, 0, 0]);
        assert!(o.get_pixel(1, 0)[0] > 100 && o.get_pixel(1, 0)[1] == 0);
        assert!(o.get_pixel(2, 0)[1] > 100 && o.get_pixel(2, 0)[0] == 0);
    }
}
