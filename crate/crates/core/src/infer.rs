//! Segmentation by two passes: reconstruction under the image's own domain
//! label and translation under the opposite one. Their class probabilities
//! are averaged and argmaxed, ties going to the lower class. For target
//! images these are the target and source passes.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::Graph;
use crate::domain::DomainLabel;
use crate::image::LabelImage;
use crate::nets::Networks;
use crate::nn::{GroupSet, ParamStore};
use crate::preproc::NUM_CLASSES;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceResult<S> {
    /// `[1, H, W]` reconstruction in the input's domain.
    pub recon: Tensor<S>,
    /// `[1, H, W]` translation to the opposite domain.
    pub translation: Tensor<S>,
    /// `[3, H, W]` class probabilities of the reconstruction pass.
    pub prob_recon: Tensor<S>,
    /// `[3, H, W]` class probabilities of the translation pass.
    pub prob_translation: Tensor<S>,
    pub mask: LabelImage,
}

/// Pixelwise `(a + b) / 2` of two `[3, H, W]` probability maps and its
/// argmax with ties to the lower index.
pub fn average_argmax<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<(Tensor<S>, LabelImage)> {
    if a.shape() != b.shape() || a.rank() != 3 || a.dim(0) != NUM_CLASSES {
        return Err(shape_err!("probabilities {:?} and {:?}", a.shape(), b.shape()));
    }
    let half = S::lit(0.5);
    let avg = a.zip_map(b, |x, y| (x + y) * half);
    let (h, w) = (a.dim(1), a.dim(2));
    Ok((avg.clone(), argmax_classes(&avg, h, w)))
}

pub fn argmax_classes<S: Real>(p: &Tensor<S>, h: usize, w: usize) -> LabelImage {
    let d = p.data();
    LabelImage::from_fn(h, w, |y, x| {
        let i = y * w + x;
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if d[c * h * w + i] > d[best * h * w + i] {
                best = c;
            }
        }
        best as u8
    })
}

/// Runs both passes over a batch `[N, 1, H, W]` of `domain` images without
/// any readiness check.
pub fn predict<S: Real>(nets: &Networks, store: &ParamStore<S>, images: &Tensor<S>, domain: DomainLabel) -> Result<Vec<InferenceResult<S>>> {
    nets.check_images(images)?;
    let n = images.dim(0);
    let mut g = Graph::with_params(store, GroupSet::NONE);
    let x = g.constant(images.clone());
    let t = nets.pass(&mut g, x, &alloc::vec![domain; n])?;
    let s = nets.pass(&mut g, x, &alloc::vec![domain.flip(); n])?;
    let pt = g.softmax1(t.logits);
    let ps = g.softmax1(s.logits);
    (0..n)
        .map(|i| {
            let prob_recon = g.value(pt).index0(i);
            let prob_translation = g.value(ps).index0(i);
            let (_, mask) = average_argmax(&prob_recon, &prob_translation)?;
            Ok(InferenceResult {
                recon: g.value(t.image).index0(i),
                translation: g.value(s.image).index0(i),
                prob_recon,
                prob_translation,
                mask,
            })
        })
        .collect()
}

/// Read-only view of a model that finished Phase 2.
#[derive(Clone, Copy, Debug)]
pub struct Segmenter<'a, S> {
    pub nets: &'a Networks,
    pub store: &'a ParamStore<S>,
}

impl<'a, S: Real> Segmenter<'a, S> {
    /// `phase2_steps` is the number of Phase 2 updates behind `store`.
    pub fn new(nets: &'a Networks, store: &'a ParamStore<S>, phase2_steps: u64) -> Result<Self> {
        if phase2_steps == 0 {
            return Err(Error::NotReady(format!("model has no Phase 2 training ({} params)", store.len())));
        }
        Ok(Self { nets, store })
    }

    /// Target-domain inference.
    pub fn infer(&self, images: &Tensor<S>) -> Result<Vec<InferenceResult<S>>> {
        predict(self.nets, self.store, images, DomainLabel::Target)
    }

    pub fn infer_domain(&self, images: &Tensor<S>, domain: DomainLabel) -> Result<Vec<InferenceResult<S>>> {
        predict(self.nets, self.store, images, domain)
    }

    pub fn infer_one(&self, image: &Tensor<S>) -> Result<InferenceResult<S>> {
        let mut shape = alloc::vec![1];
        shape.extend_from_slice(image.shape());
        let batch = image.clone().reshape(&shape)?;
        Ok(self.infer(&batch)?.remove(0))
    }
}
