//! On-disk sample container: a raw little-endian array (`<stem>.raw`) with a
//! JSON sidecar (`<stem>.json`). Images are f32, label maps u8.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use vesselda_core::domain::DomainLabel;
use vesselda_core::image::{Image, LabelImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
    U8,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub dtype: DType,
    /// `[height, width]`, row-major.
    pub shape: Vec<usize>,
    pub spacing_mm: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// `image`, `labels` or `mask`.
    pub kind: String,
}

impl Sidecar {
    pub fn image(img: &Image, spacing_mm: [f64; 2], domain: Option<DomainLabel>, seed: Option<u64>) -> Self {
        Self {
            dtype: DType::F32,
            shape: vec![img.height, img.width],
            spacing_mm: spacing_mm.to_vec(),
            domain,
            seed,
            kind: "image".into(),
        }
    }

    pub fn labels(l: &LabelImage, spacing_mm: [f64; 2], domain: Option<DomainLabel>, seed: Option<u64>) -> Self {
        Self {
            dtype: DType::U8,
            shape: vec![l.height, l.width],
            spacing_mm: spacing_mm.to_vec(),
            domain,
            seed,
            kind: "labels".into(),
        }
    }
}

pub fn raw_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.raw"))
}

pub fn sidecar_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.json"))
}

fn write_pair(dir: &Path, stem: &str, meta: &Sidecar, bytes: &[u8]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let raw = raw_path(dir, stem);
    let side = sidecar_path(dir, stem);
    fs::write(&raw, bytes).with_context(|| format!("writing {}", raw.display()))?;
    fs::write(&side, serde_json::to_string_pretty(meta)? + "\n").with_context(|| format!("writing {}", side.display()))?;
    Ok(vec![raw, side])
}

fn read_pair(dir: &Path, stem: &str, dtype: DType) -> Result<(Sidecar, Vec<u8>)> {
    let side = sidecar_path(dir, stem);
    let text = fs::read_to_string(&side).with_context(|| format!("reading {}", side.display()))?;
    let meta: Sidecar = serde_json::from_str(&text).with_context(|| format!("parsing {}", side.display()))?;
    ensure!(meta.dtype == dtype, "{}: dtype {:?}, expected {:?}", side.display(), meta.dtype, dtype);
    ensure!(meta.shape.len() == 2, "{}: shape must be [height, width]", side.display());
    let raw = raw_path(dir, stem);
    let bytes = fs::read(&raw).with_context(|| format!("reading {}", raw.display()))?;
    let expect = meta.shape.iter().product::<usize>() * dtype.size();
    ensure!(bytes.len() == expect, "{}: {} bytes, expected {}", raw.display(), bytes.len(), expect);
    Ok((meta, bytes))
}

/// Writes `img` as f32; values are rounded to single precision.
pub fn write_image(dir: &Path, stem: &str, img: &Image, meta: &Sidecar) -> Result<Vec<PathBuf>> {
    ensure!(meta.dtype == DType::F32 && meta.shape == [img.height, img.width], "sidecar does not describe the image");
    let bytes: Vec<u8> = img.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    write_pair(dir, stem, meta, &bytes)
}

pub fn read_image(dir: &Path, stem: &str) -> Result<(Image, Sidecar)> {
    let (meta, bytes) = read_pair(dir, stem, DType::F32)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((Image::from_vec(meta.shape[0], meta.shape[1], data)?, meta))
}

pub fn write_labels(dir: &Path, stem: &str, labels: &LabelImage, meta: &Sidecar) -> Result<Vec<PathBuf>> {
    ensure!(meta.dtype == DType::U8 && meta.shape == [labels.height, labels.width], "sidecar does not describe the label map");
    labels.validate()?;
    write_pair(dir, stem, meta, &labels.data)
}

pub fn read_labels(dir: &Path, stem: &str) -> Result<(LabelImage, Sidecar)> {
    let (meta, bytes) = read_pair(dir, stem, DType::U8)?;
    let l = LabelImage::from_vec(meta.shape[0], meta.shape[1], bytes)?;
    l.validate()?;
    Ok((l, meta))
}

/// Stems of every `*.json` sidecar in `dir` ending in `suffix`, sorted.
pub fn list_stems(dir: &Path, suffix: &str) -> Result<Vec<String>> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let mut out = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.extension().is_some_and(|x| x == "json") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                if stem.ends_with(suffix) {
                    out.push(stem.to_string());
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Stem of the image of sample `id`.
pub fn image_stem(id: u64) -> String {
    format!("{id:05}.img")
}

/// Stem of the label map of sample `id`.
pub fn labels_stem(id: u64) -> String {
    format!("{id:05}.lab")
}

/// Sample id from a stem such as `00012.img`.
pub fn stem_id(stem: &str) -> Option<u64> {
    stem.split('.').next()?.parse().ok()
}
