//! Synthetic dual-domain vascular phantoms.
//!
//! A phantom is a 2D slice with an elliptical "brain" filled with correlated
//! texture, crossed by tortuous tubes grown as bounded-curvature random walks.
//! Source-domain tubes are wide, bright and start near the center; target
//! tubes are thin, dark and run along the periphery. Every sample is a pure
//! function of its [`PhantomSpec`], including the seed.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::domain::DomainLabel;
use crate::image::{BinaryMask, Image};
use crate::rng::{derive_seed, normal, seeded, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Bright,
    Dark,
}

impl Polarity {
    pub fn sign(self) -> f64 {
        match self {
            Polarity::Bright => 1.0,
            Polarity::Dark => -1.0,
        }
    }
}

/// Ellipse sampling ranges, as fractions of the image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrainShape {
    pub center_jitter: f64,
    pub semi_axis_y: (f64, f64),
    pub semi_axis_x: (f64, f64),
    pub max_rotation_rad: f64,
}

impl Default for BrainShape {
    fn default() -> Self {
        Self {
            center_jitter: 0.04,
            semi_axis_y: (0.38, 0.45),
            semi_axis_x: (0.32, 0.40),
            max_rotation_rad: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub image_size: usize,
    pub domain: DomainLabel,
    /// Inclusive range of root vessels per sample.
    pub n_vessels: (usize, usize),
    pub radius_range_px: (f64, f64),
    pub polarity: Polarity,
    pub brain_shape: BrainShape,
    /// Std of the correlated background texture, relative to contrast 1.
    pub noise_level: f64,
    pub seed: u64,
    /// Mean brain intensity before scaling.
    pub brain_level: f64,
    /// Peak vessel contrast against the brain (sign from `polarity`).
    pub vessel_contrast: f64,
    /// Walk length range in pixels at 64 px (scaled with `image_size`).
    pub length_px: (f64, f64),
    /// Maximum heading change per unit step.
    pub max_turn_rad: f64,
    /// Probability per step of spawning a side branch.
    pub branch_prob: f64,
    /// Range of normalized elliptical radius where roots start.
    pub start_radius: (f64, f64),
    /// Roots head along the ellipse boundary instead of in a random direction.
    pub tangential: bool,
    /// Linear intensity scale applied last ("scanner units").
    pub intensity_scale: f64,
}

impl PhantomSpec {
    /// Angiography-like defaults: bright, thick, central vessels.
    pub fn source(seed: u64) -> Self {
        Self {
            image_size: 64,
            domain: DomainLabel::Source,
            n_vessels: (3, 5),
            radius_range_px: (1.6, 2.8),
            polarity: Polarity::Bright,
            brain_shape: BrainShape::default(),
            noise_level: 0.05,
            seed,
            brain_level: 0.35,
            vessel_contrast: 0.5,
            length_px: (30.0, 60.0),
            max_turn_rad: 0.15,
            branch_prob: 0.02,
            start_radius: (0.0, 0.45),
            tangential: false,
            intensity_scale: 400.0,
        }
    }

    /// Venography-like defaults: dark, thin, peripheral vessels.
    pub fn target(seed: u64) -> Self {
        Self {
            image_size: 64,
            domain: DomainLabel::Target,
            n_vessels: (4, 6),
            radius_range_px: (1.0, 1.6),
            polarity: Polarity::Dark,
            brain_shape: BrainShape::default(),
            noise_level: 0.06,
            seed,
            brain_level: 0.65,
            vessel_contrast: 0.45,
            length_px: (30.0, 60.0),
            max_turn_rad: 0.12,
            branch_prob: 0.02,
            start_radius: (0.55, 0.85),
            tangential: true,
            intensity_scale: 250.0,
        }
    }

    pub fn default_for(domain: DomainLabel, seed: u64) -> Self {
        match domain {
            DomainLabel::Source => Self::source(seed),
            DomainLabel::Target => Self::target(seed),
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (rmin, rmax) = self.radius_range_px;
        if self.image_size < 32 {
            return Err(Error::Config(alloc::format!(
                "image_size {} is below the minimum of 32",
                self.image_size
            )));
        }
        if !(rmin > 0.0 && rmin <= rmax) {
            return Err(Error::Config(alloc::format!(
                "invalid radius range [{rmin}, {rmax}]"
            )));
        }
        if self.n_vessels.0 > self.n_vessels.1 {
            return Err(Error::Config("n_vessels min exceeds max".into()));
        }
        if self.length_px.0 > self.length_px.1 || self.length_px.0 <= 0.0 {
            return Err(Error::Config("invalid length range".into()));
        }
        let expected = match self.domain {
            DomainLabel::Source => Polarity::Bright,
            DomainLabel::Target => Polarity::Dark,
        };
        if self.polarity != expected {
            return Err(Error::Config(alloc::format!(
                "{} phantoms must use {:?} polarity",
                self.domain.as_str(),
                expected
            )));
        }
        if self.noise_level < 0.0 || !(0.0..=1.0).contains(&self.branch_prob) {
            return Err(Error::Config("noise_level and branch_prob must be non-negative probabilities".into()));
        }
        Ok(())
    }
}

/// One phantom slice with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    pub seed: u64,
    pub image: Image,
    pub brain_mask: BinaryMask,
    pub vessel_mask: BinaryMask,
    pub domain: DomainLabel,
}

/// A target sample whose masks are withheld from training code.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample(LabeledSample);

impl UnlabeledSample {
    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn image(&self) -> &Image {
        &self.0.image
    }

    pub fn domain(&self) -> DomainLabel {
        self.0.domain
    }

    /// Ground truth, for post-hoc evaluation only.
    pub fn reveal_for_evaluation(&self) -> &LabeledSample {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub source_labeled: usize,
    pub target_unlabeled: usize,
    pub target_labeled: usize,
    pub val: usize,
    pub test_source: usize,
    pub test_target: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            source_labeled: 45,
            target_unlabeled: 17,
            target_labeled: 3,
            val: 4,
            test_source: 4,
            test_target: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub source_labeled: Vec<LabeledSample>,
    pub target_unlabeled: Vec<UnlabeledSample>,
    pub target_labeled: Vec<LabeledSample>,
    /// Annotated target samples used for model selection.
    pub val: Vec<LabeledSample>,
    pub test_source: Vec<LabeledSample>,
    pub test_target: Vec<LabeledSample>,
}

impl DatasetSplit {
    /// Sample ids per split, in split order.
    pub fn membership(&self) -> [(&'static str, Vec<u64>); 6] {
        let ids = |v: &[LabeledSample]| v.iter().map(|s| s.id).collect::<Vec<_>>();
        [
            ("source_labeled", ids(&self.source_labeled)),
            (
                "target_unlabeled",
                self.target_unlabeled.iter().map(|s| s.id()).collect(),
            ),
            ("target_labeled", ids(&self.target_labeled)),
            ("val", ids(&self.val)),
            ("test_source", ids(&self.test_source)),
            ("test_target", ids(&self.test_target)),
        ]
    }
}

/// Generates the six splits. Each sample gets a unique id (its global index)
/// and the seed `derive_seed(seed, id)`.
pub fn make_split(
    source_spec: &PhantomSpec,
    target_spec: &PhantomSpec,
    counts: SplitCounts,
    seed: u64,
) -> Result<DatasetSplit> {
    source_spec.validate()?;
    target_spec.validate()?;
    if source_spec.domain != DomainLabel::Source || target_spec.domain != DomainLabel::Target {
        return Err(Error::Config("source/target specs have swapped domains".into()));
    }
    if source_spec.radius_range_px.0 <= target_spec.radius_range_px.0 {
        return Err(Error::Config(
            "source vessels must have a larger minimum radius than target vessels".into(),
        ));
    }
    let mut next_id = 0u64;
    let mut batch = |spec: &PhantomSpec, n: usize| -> Result<Vec<LabeledSample>> {
        (0..n)
            .map(|_| {
                let id = next_id;
                next_id += 1;
                let mut s = generate_sample(&spec.with_seed(derive_seed(seed, id)))?;
                s.id = id;
                Ok(s)
            })
            .collect()
    };
    Ok(DatasetSplit {
        source_labeled: batch(source_spec, counts.source_labeled)?,
        target_unlabeled: batch(target_spec, counts.target_unlabeled)?
            .into_iter()
            .map(UnlabeledSample)
            .collect(),
        target_labeled: batch(target_spec, counts.target_labeled)?,
        val: batch(target_spec, counts.val)?,
        test_source: batch(source_spec, counts.test_source)?,
        test_target: batch(target_spec, counts.test_target)?,
    })
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ay: f64,
    ax: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    /// Normalized radius: < 1 inside.
    fn rho(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dy * self.cos + dx * self.sin) / self.ay;
        let v = (-dy * self.sin + dx * self.cos) / self.ax;
        libm::sqrt(u * u + v * v)
    }

    /// Point at normalized radius `rho` and parametric angle `t`.
    fn point(&self, rho: f64, t: f64) -> (f64, f64) {
        let u = rho * self.ay * libm::cos(t);
        let v = rho * self.ax * libm::sin(t);
        (
            self.cy + u * self.cos - v * self.sin,
            self.cx + u * self.sin + v * self.cos,
        )
    }
}

struct Tube {
    points: Vec<(f64, f64)>,
    radius: f64,
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Renders one phantom.
pub fn generate_sample(spec: &PhantomSpec) -> Result<LabeledSample> {
    spec.validate()?;
    let n = spec.image_size;
    let nf = n as f64;
    let mut rng = seeded(spec.seed);
    let bs = &spec.brain_shape;
    let rot = uniform(&mut rng, -bs.max_rotation_rad, bs.max_rotation_rad);
    let ellipse = Ellipse {
        cy: nf / 2.0 + uniform(&mut rng, -bs.center_jitter, bs.center_jitter) * nf,
        cx: nf / 2.0 + uniform(&mut rng, -bs.center_jitter, bs.center_jitter) * nf,
        ay: uniform(&mut rng, bs.semi_axis_y.0, bs.semi_axis_y.1) * nf,
        ax: uniform(&mut rng, bs.semi_axis_x.0, bs.semi_axis_x.1) * nf,
        cos: libm::cos(rot),
        sin: libm::sin(rot),
    };
    let brain = BinaryMask::from_fn(n, n, |y, x| {
        ellipse.rho(y as f64 + 0.5, x as f64 + 0.5) <= 1.0
    });

    let texture = correlated_noise(&mut rng, n, 1.5);
    let n_roots = if spec.n_vessels.1 > spec.n_vessels.0 {
        rng.random_range(spec.n_vessels.0..=spec.n_vessels.1)
    } else {
        spec.n_vessels.0
    };
    let scale = nf / 64.0;
    let mut tubes = Vec::new();
    for _ in 0..n_roots {
        let radius = uniform(&mut rng, spec.radius_range_px.0, spec.radius_range_px.1);
        let t = uniform(&mut rng, 0.0, 2.0 * PI);
        let rho = uniform(&mut rng, spec.start_radius.0, spec.start_radius.1);
        let start = ellipse.point(rho, t);
        let heading = if spec.tangential {
            // Tangent of the ellipse at parameter t, either orientation.
            let (py, px) = ellipse.point(rho, t + 1e-3);
            let base = libm::atan2(py - start.0, px - start.1);
            let flip = if rng.random_bool(0.5) { PI } else { 0.0 };
            base + flip + uniform(&mut rng, -0.2, 0.2)
        } else {
            uniform(&mut rng, 0.0, 2.0 * PI)
        };
        let length = uniform(&mut rng, spec.length_px.0, spec.length_px.1) * scale;
        grow(&mut rng, spec, &ellipse, start, heading, radius, length, 1, &mut tubes);
    }

    let sigma_of = |r: f64| r / libm::sqrt(2.0 * core::f64::consts::LN_2);
    let mut profile = vec![0.0f64; n * n];
    let mut vessel = BinaryMask::new(n, n);
    for tube in &tubes {
        let reach = tube.radius * 2.5 + 1.0;
        let (mut y0, mut y1, mut x0, mut x1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for &(py, px) in &tube.points {
            y0 = y0.min(py);
            y1 = y1.max(py);
            x0 = x0.min(px);
            x1 = x1.max(px);
        }
        let clamp = |v: f64| (v.max(0.0) as usize).min(n - 1);
        let s = sigma_of(tube.radius);
        for y in clamp(y0 - reach)..=clamp(y1 + reach) {
            for x in clamp(x0 - reach)..=clamp(x1 + reach) {
                let d = polyline_distance(&tube.points, y as f64 + 0.5, x as f64 + 0.5);
                let i = y * n + x;
                if d <= tube.radius && brain.data[i] {
                    vessel.data[i] = true;
                }
                let p = libm::exp(-d * d / (2.0 * s * s));
                if p > profile[i] {
                    profile[i] = p;
                }
            }
        }
    }

    let sign = spec.polarity.sign();
    let data = (0..n * n)
        .map(|i| {
            let v = if brain.data[i] {
                spec.brain_level
                    + spec.noise_level * texture[i]
                    + sign * spec.vessel_contrast * profile[i]
            } else {
                0.25 * spec.noise_level * texture[i]
            };
            v * spec.intensity_scale
        })
        .collect();
    Ok(LabeledSample {
        id: 0,
        seed: spec.seed,
        image: Image::from_vec(n, n, data)?,
        brain_mask: brain,
        vessel_mask: vessel,
        domain: spec.domain,
    })
}

#[allow(clippy::too_many_arguments)]
fn grow(
    rng: &mut Rng,
    spec: &PhantomSpec,
    ellipse: &Ellipse,
    start: (f64, f64),
    mut heading: f64,
    radius: f64,
    length: f64,
    depth: u32,
    tubes: &mut Vec<Tube>,
) {
    let mut points = vec![start];
    let mut pos = start;
    let mut branches = Vec::new();
    let steps = length as usize;
    for _ in 0..steps {
        heading += uniform(rng, -spec.max_turn_rad, spec.max_turn_rad);
        pos = (pos.0 + libm::sin(heading), pos.1 + libm::cos(heading));
        if ellipse.rho(pos.0, pos.1) > 0.97 {
            break;
        }
        points.push(pos);
        if depth > 0 && rng.random_bool(spec.branch_prob) {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            branches.push((pos, heading + side * uniform(rng, 0.4, 1.0)));
        }
    }
    tubes.push(Tube { points, radius });
    for (p, h) in branches {
        let child_radius = (radius * 0.75).max(spec.radius_range_px.0 * 0.75);
        grow(rng, spec, ellipse, p, h, child_radius, length * 0.5, depth - 1, tubes);
    }
}

fn polyline_distance(points: &[(f64, f64)], y: f64, x: f64) -> f64 {
    if points.len() == 1 {
        let (dy, dx) = (y - points[0].0, x - points[0].1);
        return libm::sqrt(dy * dy + dx * dx);
    }
    let mut best = f64::MAX;
    for w in points.windows(2) {
        let (ay, ax) = w[0];
        let (by, bx) = w[1];
        let (vy, vx) = (by - ay, bx - ax);
        let len2 = vy * vy + vx * vx;
        let t = if len2 > 0.0 {
            (((y - ay) * vy + (x - ax) * vx) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (dy, dx) = (y - (ay + t * vy), x - (ax + t * vx));
        best = best.min(dy * dy + dx * dx);
    }
    libm::sqrt(best)
}

/// White noise smoothed by a Gaussian of std `sigma`, rescaled to unit std.
fn correlated_noise(rng: &mut Rng, n: usize, sigma: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..n * n).map(|_| normal::<f64>(rng)).collect();
    let radius = libm::ceil(3.0 * sigma) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| libm::exp(-((k * k) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|v| v / norm).collect();
    let reflect = |i: isize| -> usize {
        let m = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= m {
            i = 2 * m - i - 1;
        }
        i.clamp(0, m - 1) as usize
    };
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * white[y * n + reflect(x as isize + k as isize - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[reflect(y as isize + k as isize - radius) * n + x])
                .sum();
        }
    }
    let mean = out.iter().sum::<f64>() / out.len() as f64;
    let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / out.len() as f64;
    let sd = libm::sqrt(var).max(1e-12);
    out.iter().map(|v| (v - mean) / sd).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_given_seed() {
        let a = generate_sample(&PhantomSpec::source(9)).unwrap();
        let b = generate_sample(&PhantomSpec::source(9)).unwrap();
        assert_eq!(a, b);
        let c = generate_sample(&PhantomSpec::source(10)).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn zero_vessels_gives_empty_vessel_mask() {
        let mut spec = PhantomSpec::target(3);
        spec.n_vessels = (0, 0);
        let s = generate_sample(&spec).unwrap();
        assert_eq!(s.vessel_mask.count(), 0);
        assert!(s.brain_mask.count() > 0);
    }

    #[test]
    fn invalid_radius_range_is_a_config_error() {
        let mut spec = PhantomSpec::source(1);
        spec.radius_range_px = (3.0, 2.0);
        assert!(matches!(generate_sample(&spec), Err(Error::Config(_))));
        spec.radius_range_px = (2.0, 3.0);
        spec.image_size = 16;
        assert!(matches!(generate_sample(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn vessels_inside_brain_and_polarity_holds() {
        let mut ok = [0usize; 2];
        for (k, domain) in [DomainLabel::Source, DomainLabel::Target].into_iter().enumerate() {
            for seed in 0..50 {
                let s = generate_sample(&PhantomSpec::default_for(domain, seed)).unwrap();
                assert!(s.vessel_mask.is_subset_of(&s.brain_mask));
                let inside = s.image.masked_mean(&s.vessel_mask);
                let around = s.image.masked_mean(&s.brain_mask.and_not(&s.vessel_mask));
                if let (Some(v), Some(b)) = (inside, around) {
                    let brighter = v > b;
                    if brighter == (domain == DomainLabel::Source) {
                        ok[k] += 1;
                    }
                }
            }
        }
        assert!(ok[0] >= 48 && ok[1] >= 48, "{ok:?}");
    }

    #[test]
    fn default_split_counts_and_disjointness() {
        let split = make_split(
            &PhantomSpec::source(0),
            &PhantomSpec::target(0),
            SplitCounts::default(),
            42,
        )
        .unwrap();
        assert_eq!(split.source_labeled.len(), 45);
        assert_eq!(split.target_unlabeled.len(), 17);
        assert_eq!(split.target_labeled.len(), 3);
        assert_eq!(split.val.len(), 4);
        assert_eq!(split.test_source.len(), 4);
        assert_eq!(split.test_target.len(), 4);
        let mut all: Vec<u64> = split.membership().iter().flat_map(|(_, v)| v.clone()).collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn split_without_target_labels_is_valid_and_repeatable() {
        let counts = SplitCounts {
            target_labeled: 0,
            source_labeled: 4,
            target_unlabeled: 3,
            val: 1,
            test_source: 1,
            test_target: 1,
        };
        let a = make_split(&PhantomSpec::source(0), &PhantomSpec::target(0), counts, 5).unwrap();
        let b = make_split(&PhantomSpec::source(0), &PhantomSpec::target(0), counts, 5).unwrap();
        assert!(a.target_labeled.is_empty());
        assert_eq!(a.membership(), b.membership());
        assert_eq!(a, b);
    }
}
