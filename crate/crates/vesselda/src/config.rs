//! Run configuration: one JSON file whose keys override size-aware
//! defaults, plus `--set path=value` overrides from the command line.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use vesselda_core::domain::DomainLabel;
use vesselda_core::nets::ArchConfig;
use vesselda_core::phase1::Phase1Config;
use vesselda_core::phase2::Phase2Config;
use vesselda_core::preproc::PreprocConfig;
use vesselda_core::sato::{geometric_scales, SatoConfig, Threshold};
use vesselda_core::synthgen::{PhantomSpec, Polarity, SplitCounts};

use crate::checkpoint::sha256_hex;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub counts: SplitCounts,
    pub source: PhantomSpec,
    pub target: PhantomSpec,
    /// In-plane spacing recorded for generated slices.
    pub spacing_mm: f64,
}

/// Architecture overrides on top of the desk preset for `image_size`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetsSection {
    pub z_dim: Option<usize>,
    pub w_dim: Option<usize>,
    pub mapping_layers: Option<usize>,
    pub channels: Option<Vec<usize>>,
    pub label_hidden: Option<(usize, usize)>,
    pub perceptual_channels: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferSection {
    pub batch_size: usize,
    pub overlays: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SatoSection {
    pub scales_px: Vec<f64>,
    pub normalize: bool,
    pub threshold: Threshold,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Compute the Otsu threshold inside the ground-truth brain mask when
    /// one is available.
    pub threshold_in_brain: bool,
}

impl Default for SatoSection {
    fn default() -> Self {
        let d = SatoConfig::default();
        Self {
            scales_px: d.scales_px,
            normalize: d.normalize,
            threshold: d.threshold,
            alpha1: d.alpha1,
            alpha2: d.alpha2,
            threshold_in_brain: true,
        }
    }
}

impl SatoSection {
    /// Filter settings for images of `domain`: bright lines for the source
    /// domain, dark lines for the target domain.
    pub fn for_domain(&self, domain: DomainLabel) -> SatoConfig {
        SatoConfig {
            scales_px: self.scales_px.clone(),
            polarity: match domain {
                DomainLabel::Source => Polarity::Bright,
                DomainLabel::Target => Polarity::Dark,
            },
            normalize: self.normalize,
            threshold: self.threshold,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
        }
    }
}

/// Base profile the defaults are drawn from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Small networks and short schedules sized for a single CPU.
    #[default]
    Desk,
    /// Full-size networks at 512 px with the long schedules.
    Paper,
}

impl Preset {
    pub fn default_size(self) -> usize {
        match self {
            Preset::Desk => 64,
            Preset::Paper => 512,
        }
    }
}

/// Evaluation has no tunables yet; the section exists so that configs
/// stay uniform across modules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub output_root: PathBuf,
    pub image_size: usize,
    pub synthgen: SynthSection,
    pub preproc: PreprocConfig,
    pub nets: NetsSection,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub infer: InferSection,
    pub sato: SatoSection,
    pub metrics: MetricsSection,
}

impl RunConfig {
    /// Desk defaults at `image_size`. Phantoms are always drawn at 64 px and
    /// 0.5 mm; preprocessing resamples them to the network size.
    pub fn for_size(image_size: usize) -> Self {
        Self::preset(Preset::Desk, image_size)
    }

    pub fn preset(preset: Preset, image_size: usize) -> Self {
        let spacing = 0.5 * 64.0 / image_size as f64;
        let (phase1, phase2) = match preset {
            Preset::Desk => (Phase1Config::default(), Phase2Config::default()),
            Preset::Paper => (Phase1Config::paper(), Phase2Config::paper()),
        };
        Self {
            preset,
            seed: 0,
            output_root: PathBuf::from("runs/default"),
            image_size,
            synthgen: SynthSection {
                counts: SplitCounts::default(),
                source: PhantomSpec::source(0),
                target: PhantomSpec::target(0),
                spacing_mm: 0.5,
            },
            preproc: PreprocConfig {
                target_spacing_mm: [spacing; 3],
                size: image_size,
                ..PreprocConfig::default()
            },
            nets: NetsSection::default(),
            phase1,
            phase2,
            infer: InferSection {
                batch_size: 4,
                overlays: true,
            },
            sato: SatoSection {
                scales_px: geometric_scales(1.0, 4.0, 4).iter().map(|s| s * image_size as f64 / 64.0).collect(),
                ..SatoSection::default()
            },
            metrics: MetricsSection {},
        }
    }

    pub fn arch(&self) -> ArchConfig {
        let mut a = match self.preset {
            Preset::Desk => ArchConfig::desk(self.image_size),
            Preset::Paper => ArchConfig {
                image_size: self.image_size,
                ..ArchConfig::paper()
            },
        };
        let n = &self.nets;
        if let Some(v) = n.z_dim {
            a.z_dim = v;
        }
        if let Some(v) = n.w_dim {
            a.w_dim = v;
        }
        if let Some(v) = n.mapping_layers {
            a.mapping_layers = v;
        }
        if let Some(v) = &n.channels {
            a.channels = v.clone();
        }
        if let Some(v) = n.label_hidden {
            a.label_hidden = v;
        }
        if let Some(v) = &n.perceptual_channels {
            a.perceptual_channels = v.clone();
        }
        a
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |section: &str, e: vesselda_core::Error| ConfigError::new(format!("{section}: {e}"), None);
        if self.preproc.size != self.image_size {
            return Err(ConfigError::new(
                format!("preproc.size ({}) must equal image_size ({})", self.preproc.size, self.image_size),
                None,
            ));
        }
        self.arch().validate().map_err(|e| err("nets", e))?;
        self.synthgen.source.validate().map_err(|e| err("synthgen.source", e))?;
        self.synthgen.target.validate().map_err(|e| err("synthgen.target", e))?;
        self.phase1.validate().map_err(|e| err("phase1", e))?;
        self.phase2.validate().map_err(|e| err("phase2", e))?;
        self.sato.for_domain(DomainLabel::Source).validate().map_err(|e| err("sato", e))?;
        if self.infer.batch_size == 0 {
            return Err(ConfigError::new("infer.batch_size must be positive".into(), None));
        }
        if !(self.synthgen.spacing_mm > 0.0) {
            return Err(ConfigError::new("synthgen.spacing_mm must be positive".into(), None));
        }
        Ok(())
    }
}

/// Invalid configuration; `line` points into the config file when known.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError {
    pub message: String,
    pub line: Option<usize>,
}

impl ConfigError {
    pub fn new(message: String, line: Option<usize>) -> Self {
        Self { message, line }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "config error at line {l}: {}", self.message),
            None => write!(f, "config error: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// First line of `text` mentioning `"key"`.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

fn find_unknown(user: &Value, defaults: &Value, path: &mut Vec<String>) -> Option<Vec<String>> {
    let (Value::Object(u), Value::Object(d)) = (user, defaults) else {
        return None;
    };
    for (k, v) in u {
        path.push(k.clone());
        match d.get(k) {
            None => return Some(path.clone()),
            Some(dv) => {
                if let Some(p) = find_unknown(v, dv, path) {
                    return Some(p);
                }
            }
        }
        path.pop();
    }
    None
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses one `path.to.key=value` override. The value is read as JSON and
/// falls back to a plain string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value), ConfigError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| ConfigError::new(format!("override {s:?} is not key=value"), None))?;
    let path: Vec<String> = k.split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::new(format!("override key {k:?} is malformed"), None));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((path, value))
}

fn set_path(root: &mut Value, path: &[String], value: Value) {
    let mut cur = root;
    for k in &path[..path.len() - 1] {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        cur = cur
            .as_object_mut()
            .expect("object")
            .entry(k.clone())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    if !cur.is_object() {
        *cur = Value::Object(Map::new());
    }
    cur.as_object_mut().expect("object").insert(path[path.len() - 1].clone(), value);
}

/// Builds the effective configuration from optional file text and overrides.
pub fn load(text: Option<&str>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let src = text.unwrap_or("{}");
    let mut user: Value = serde_json::from_str(src).map_err(|e| ConfigError::new(format!("invalid JSON: {e}"), Some(e.line())))?;
    if !user.is_object() {
        return Err(ConfigError::new("top level must be a JSON object".into(), Some(1)));
    }
    for o in overrides {
        let (path, value) = parse_override(o)?;
        set_path(&mut user, &path, value);
    }
    let preset = match user.get("preset") {
        None => Preset::Desk,
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|_| ConfigError::new("preset must be \"desk\" or \"paper\"".into(), line_of(src, "preset")))?,
    };
    let size = match user.get("image_size") {
        None => preset.default_size(),
        Some(v) => v
            .as_u64()
            .filter(|&s| s >= 8)
            .ok_or_else(|| ConfigError::new("image_size must be an integer >= 8".into(), line_of(src, "image_size")))?
            as usize,
    };
    let defaults = RunConfig::preset(preset, size).to_value();
    if let Some(path) = find_unknown(&user, &defaults, &mut Vec::new()) {
        let key = path.last().cloned().unwrap_or_default();
        return Err(ConfigError::new(format!("unknown key `{}`", path.join(".")), line_of(src, &key)));
    }
    let mut merged = defaults;
    merge(&mut merged, user);
    let cfg: RunConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        let key = path.rsplit('.').next().unwrap_or("").to_string();
        ConfigError::new(format!("`{path}`: {}", e.inner()), line_of(src, &key))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        let c = load(None, &[]).unwrap();
        assert_eq!(c, RunConfig::for_size(64));
        assert_eq!(c.arch(), ArchConfig::desk(64));
        let again: RunConfig = serde_json::from_value(c.to_value()).unwrap();
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn unknown_key_is_named_with_line() {
        let text = "{\n  \"seed\": 3,\n  \"phase1\": {\n    \"iterations\": 10,\n    \"lr_gen\": 0.1\n  }\n}";
        let e = load(Some(text), &[]).unwrap_err();
        assert_eq!(e.line, Some(5));
        assert!(e.message.contains("phase1.lr_gen"), "{}", e.message);
    }

    #[test]
    fn type_errors_and_syntax_errors_have_lines() {
        let e = load(Some("{\n \"phase2\": {\"iterations\": \"many\"}\n}"), &[]).unwrap_err();
        assert!(e.message.contains("phase2.iterations") && e.line == Some(2), "{e}");
        let e = load(Some("{\n \"seed\": 1,\n}"), &[]).unwrap_err();
        assert_eq!(e.line, Some(3));
    }

    #[test]
    fn overrides_and_size_defaults() {
        let c = load(Some("{\"image_size\": 32, \"phase1\": {\"iterations\": 7}}"), &["phase1.iterations=9".into(), "seed=5".into()]).unwrap();
        assert_eq!((c.phase1.iterations, c.seed, c.preproc.size), (9, 5, 32));
        assert_eq!(c.preproc.target_spacing_mm, [1.0; 3]);
        assert!(load(None, &["phase2.nope=1".into()]).is_err());
        assert!(load(None, &["preproc.size=32".into()]).is_err());
    }

    #[test]
    fn paper_preset() {
        let c = load(Some("{\"preset\": \"paper\"}"), &[]).unwrap();
        assert_eq!((c.image_size, c.phase1.iterations, c.phase2.iterations), (512, 250_000, 50_000));
        assert_eq!(c.arch(), ArchConfig::paper());
        assert!(load(Some("{\"preset\": \"huge\"}"), &[]).is_err());
    }
}
