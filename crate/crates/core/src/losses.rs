//! Reconstruction and segmentation losses, built on the autodiff graph.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::nn::{Conv2d, ParamGroup, ParamStore, SQRT2};
use crate::rng::Rng;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub mse: f64,
    pub perceptual: f64,
    pub dice: f64,
    pub ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            perceptual: 0.8,
            dice: 1.0,
            ce: 1.0,
        }
    }
}

pub const DICE_SMOOTH: f64 = 1e-5;
const FEATURE_EPS: f64 = 1e-8;

/// Fixed random convolutional feature extractor. Features of each layer are
/// normalised to unit length across channels at every pixel, and the
/// distance is the per-pixel squared difference averaged over pixels and
/// summed over layers.
#[derive(Clone, Debug)]
pub struct PerceptualNet {
    pub layers: Vec<Conv2d>,
}

impl PerceptualNet {
    pub fn new<S: Real>(store: &mut ParamStore<S>, rng: &mut Rng, channels: &[usize]) -> Self {
        let mut cin = 1;
        let layers = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let stride = if i == 0 { 1 } else { 2 };
                let l = Conv2d::new(store, rng, &format!("perceptual.conv{i}"), ParamGroup::Fixed, cin, c, 3, stride, true);
                cin = c;
                l
            })
            .collect();
        Self { layers }
    }

    fn features<S: Real>(&self, g: &mut Graph<S>, x: Var) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let y = l.forward(g, h);
            h = g.leaky_relu(y, 0.2, SQRT2);
            out.push(unit_channels(g, h));
        }
        out
    }

    /// Mean over the batch of the per-image distance.
    pub fn distance<S: Real>(&self, g: &mut Graph<S>, a: Var, b: Var) -> Var {
        let n = g.shape(a)[0] as f64;
        let fa_all = self.features(g, a);
        let fb_all = self.features(g, b);
        let mut total: Option<Var> = None;
        for (fa, fb) in fa_all.into_iter().zip(fb_all) {
            let s = g.shape(fa).to_vec();
            let d = g.sub(fa, fb);
            let sq = g.square(d);
            let sum = g.sum_all(sq);
            let term = g.scale(sum, 1.0 / (n * (s[2] * s[3]) as f64));
            total = Some(match total {
                Some(t) => g.add(t, term),
                None => term,
            });
        }
        total.expect("perceptual net has layers")
    }
}

fn unit_channels<S: Real>(g: &mut Graph<S>, x: Var) -> Var {
    let s = g.shape(x).to_vec();
    let sq = g.square(x);
    let norm = g.sum_to(sq, &[s[0], 1, s[2], s[3]]);
    let norm = g.affine(norm, 1.0, FEATURE_EPS);
    let inv = g.rsqrt(norm);
    let inv = g.broadcast_to(inv, &s);
    g.mul(x, inv)
}

/// `λ_mse · MSE(x, x̂) + λ_perc · perceptual(x, x̂)`.
pub fn loss_r<S: Real>(g: &mut Graph<S>, perceptual: &PerceptualNet, x: Var, x_hat: Var, w: &LossWeights) -> Result<Var> {
    if g.shape(x) != g.shape(x_hat) {
        return Err(shape_err!("loss_R operands {:?} vs {:?}", g.shape(x), g.shape(x_hat)));
    }
    let d = g.sub(x, x_hat);
    let sq = g.square(d);
    let mse = g.mean_all(sq);
    let mut loss = g.scale(mse, w.mse);
    if w.perceptual != 0.0 {
        let p = perceptual.distance(g, x, x_hat);
        let p = g.scale(p, w.perceptual);
        loss = g.add(loss, p);
    }
    Ok(loss)
}

/// `λ_dice · (1 - mean_c softDice_c) + λ_ce · meanCE`, with `logits` and
/// one-hot `y` both `[N, 3, H, W]`. Dice sums run over the batch and pixels
/// of each class.
pub fn loss_s<S: Real>(g: &mut Graph<S>, logits: Var, y: &Tensor<S>, w: &LossWeights) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 4 || s != y.shape() {
        return Err(shape_err!("loss_S logits {:?} vs labels {:?}", s, y.shape()));
    }
    let c = s[1];
    let yv = g.constant(y.clone());
    let mut loss = g.scalar(S::zero());
    if w.dice != 0.0 {
        let p = g.softmax1(logits);
        let py = g.mul(p, yv);
        let inter = g.sum_to(py, &[1, c, 1, 1]);
        let psum = g.sum_to(p, &[1, c, 1, 1]);
        let ysum = g.sum_to(yv, &[1, c, 1, 1]);
        let den = g.add(psum, ysum);
        let num = g.affine(inter, 2.0, DICE_SMOOTH);
        let den = g.affine(den, 1.0, DICE_SMOOTH);
        let dice = g.div(num, den);
        let md = g.mean_all(dice);
        let term = g.affine(md, -w.dice, w.dice);
        loss = g.add(loss, term);
    }
    if w.ce != 0.0 {
        let lp = g.log_softmax1(logits);
        let t = g.mul(lp, yv);
        let total = g.sum_all(t);
        let pixels = (s[0] * s[2] * s[3]) as f64;
        let term = g.scale(total, -w.ce / pixels);
        loss = g.add(loss, term);
    }
    Ok(loss)
}
