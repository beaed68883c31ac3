//! Training items, batch assembly and dihedral augmentation.

use alloc::vec::Vec;

use rand::Rng as _;

use crate::domain::DomainLabel;
use crate::image::LabelImage;
use crate::preproc::{one_hot, NormalizedSlice};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::{shape_err, Error, Result};

/// A preprocessed slice ready for the networks.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainItem<S> {
    /// `[1, H, W]`.
    pub image: Tensor<S>,
    pub domain: DomainLabel,
    /// One-hot `[3, H, W]` when annotated.
    pub labels: Option<Tensor<S>>,
}

impl<S: Real> TrainItem<S> {
    pub fn new(slice: &NormalizedSlice, domain: DomainLabel, labels: Option<&LabelImage>) -> Result<Self> {
        let img = slice.image();
        let image = Tensor::from_vec(&[1, img.height, img.width], img.data.iter().map(|&v| S::lit(v)).collect())?;
        let labels = match labels {
            Some(l) => {
                if l.height != img.height || l.width != img.width {
                    return Err(shape_err!("labels {}x{} vs image {}x{}", l.height, l.width, img.height, img.width));
                }
                let oh = one_hot(l)?;
                Some(Tensor::from_vec(&[3, l.height, l.width], oh.data.iter().map(|&v| S::lit(v as f64)).collect())?)
            }
            None => None,
        };
        Ok(Self { image, domain, labels })
    }

    pub fn size(&self) -> usize {
        self.image.dim(2)
    }
}

/// One of the eight symmetries of the square applied to every channel of a
/// `[C, H, W]` tensor with `H == W`. `k & 3` counts quarter turns and
/// `k & 4` adds a horizontal flip.
pub fn dihedral<S: Real>(t: &Tensor<S>, k: u8) -> Tensor<S> {
    let (c, n) = (t.dim(0), t.dim(1));
    debug_assert_eq!(n, t.dim(2));
    let src = t.data();
    Tensor::from_fn(t.shape(), |i| {
        let (ch, y, x) = (i / (n * n), (i / n) % n, i % n);
        let x = if k & 4 != 0 { n - 1 - x } else { x };
        let (sy, sx) = match k & 3 {
            0 => (y, x),
            1 => (x, n - 1 - y),
            2 => (n - 1 - y, n - 1 - x),
            _ => (n - 1 - x, y),
        };
        debug_assert!(ch < c);
        src[(ch * n + sy) * n + sx]
    })
}

/// A minibatch: images `[N, 1, H, W]`, per-sample domains and, for the
/// annotated subset, row indices and one-hot labels `[M, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    pub images: Tensor<S>,
    pub domains: Vec<DomainLabel>,
    pub labeled_rows: Vec<usize>,
    pub labels: Option<Tensor<S>>,
}

impl<S: Real> Batch<S> {
    pub fn from_items(items: &[&TrainItem<S>], augment: &[u8]) -> Result<Self> {
        if items.is_empty() {
            return Err(shape_err!("empty batch"));
        }
        let mut imgs = Vec::with_capacity(items.len());
        let mut labs = Vec::new();
        let mut labeled_rows = Vec::new();
        for (i, it) in items.iter().enumerate() {
            let k = augment.get(i).copied().unwrap_or(0);
            imgs.push(dihedral(&it.image, k));
            if let Some(l) = &it.labels {
                labeled_rows.push(i);
                labs.push(dihedral(l, k));
            }
        }
        Ok(Self {
            images: Tensor::stack(&imgs)?,
            domains: items.iter().map(|it| it.domain).collect(),
            labeled_rows,
            labels: if labs.is_empty() { None } else { Some(Tensor::stack(&labs)?) },
        })
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }
}

/// Draws batches from two domain pools: each sample picks its domain
/// uniformly, then an item uniformly within that pool.
#[derive(Clone, Debug)]
pub struct MixedSampler<S> {
    pub source: Vec<TrainItem<S>>,
    pub target: Vec<TrainItem<S>>,
    pub augment: bool,
}

impl<S: Real> MixedSampler<S> {
    pub fn new(source: Vec<TrainItem<S>>, target: Vec<TrainItem<S>>, augment: bool) -> Result<Self> {
        if source.is_empty() && target.is_empty() {
            return Err(Error::Config("no training images".into()));
        }
        Ok(Self { source, target, augment })
    }

    fn pick<'a>(&self, rng: &mut Rng, pool: &'a [TrainItem<S>]) -> &'a TrainItem<S> {
        &pool[rng.random_range(0..pool.len())]
    }

    fn aug(&self, rng: &mut Rng) -> u8 {
        if self.augment {
            rng.random_range(0..8)
        } else {
            0
        }
    }

    pub fn mixed(&self, rng: &mut Rng, n: usize) -> Result<Batch<S>> {
        let mut items = Vec::with_capacity(n);
        let mut aug = Vec::with_capacity(n);
        for _ in 0..n {
            let use_source = if self.source.is_empty() {
                false
            } else if self.target.is_empty() {
                true
            } else {
                rng.random_bool(0.5)
            };
            items.push(self.pick(rng, if use_source { &self.source } else { &self.target }));
            aug.push(self.aug(rng));
        }
        Batch::from_items(&items, &aug)
    }

    /// Batch from one domain. `labeled_fraction` is the probability of
    /// drawing from the annotated part of the pool, when it has one.
    pub fn from_domain(&self, rng: &mut Rng, domain: DomainLabel, n: usize, labeled_fraction: Option<f64>) -> Result<Batch<S>> {
        let pool = match domain {
            DomainLabel::Source => &self.source,
            DomainLabel::Target => &self.target,
        };
        if pool.is_empty() {
            return Err(Error::Config(alloc::format!("no {} images", domain.as_str())));
        }
        let (lab, unl): (Vec<&TrainItem<S>>, Vec<&TrainItem<S>>) = pool.iter().partition(|it| it.labels.is_some());
        let mut items = Vec::with_capacity(n);
        let mut aug = Vec::with_capacity(n);
        for _ in 0..n {
            let it = match labeled_fraction {
                Some(f) if !lab.is_empty() && !unl.is_empty() => {
                    let src = if rng.random_bool(f.clamp(0.0, 1.0)) { &lab } else { &unl };
                    src[rng.random_range(0..src.len())]
                }
                _ => self.pick(rng, pool),
            };
            items.push(it);
            aug.push(self.aug(rng));
        }
        Batch::from_items(&items, &aug)
    }
}
