use alloc::format;

use crate::autograd::{Graph, Var};
use crate::nn::{ParamGroup, ParamId, ParamStore};
use crate::rng::{normal_tensor, Rng};
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const SQRT2: f64 = core::f64::consts::SQRT_2;

/// Fully connected layer with equalized learning rate: weights are stored
/// with unit variance and rescaled by `lr_mul / sqrt(fan_in)` at run time.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
    weight_gain: f64,
    lr_mul: f64,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        name: &str,
        group: ParamGroup,
        in_features: usize,
        out_features: usize,
        bias_init: Option<f64>,
        lr_mul: f64,
    ) -> Self {
        let w: Tensor<S> = normal_tensor(rng, &[in_features, out_features]);
        let inv = S::lit(1.0 / lr_mul);
        let weight = store.add(format!("{name}.weight"), group, w.map(|v| v * inv));
        let bias = bias_init.map(|b| {
            store.add(
                format!("{name}.bias"),
                group,
                Tensor::full(&[out_features], S::lit(b / lr_mul)),
            )
        });
        Self {
            weight,
            bias,
            in_features,
            out_features,
            weight_gain: lr_mul / libm::sqrt(in_features as f64),
            lr_mul,
        }
    }

    /// `x: [N, in] -> [N, out]`.
    pub fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        let y = g.scale(y, self.weight_gain);
        match self.bias {
            Some(b) => {
                let mut bv = g.param(b);
                if self.lr_mul != 1.0 {
                    bv = g.scale(bv, self.lr_mul);
                }
                g.add_bias(y, bv)
            }
            None => y,
        }
    }
}

/// Square-kernel convolution with equalized learning rate.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    weight_gain: f64,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        name: &str,
        group: ParamGroup,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            normal_tensor(rng, &[out_ch, in_ch, kernel, kernel]),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_ch])));
        Self {
            weight,
            bias,
            kernel,
            stride,
            pad: kernel / 2,
            weight_gain: 1.0 / libm::sqrt((in_ch * kernel * kernel) as f64),
        }
    }

    pub fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.conv2d(x, w, self.stride, self.pad);
        let y = g.scale(y, self.weight_gain);
        match self.bias {
            Some(b) => {
                let bv = g.param(b);
                g.add_bias(y, bv)
            }
            None => y,
        }
    }
}

/// Style-modulated convolution: input channels are scaled by a per-sample
/// style computed from a latent row, and (optionally) output channels are
/// demodulated to unit expected variance.
///
/// Modulating activations instead of weights is equivalent to the per-sample
/// weight formulation and lets the whole batch share one convolution.
#[derive(Clone, Debug)]
pub struct ModConv {
    pub affine: Linear,
    pub weight: ParamId,
    pub kernel: usize,
    pub demodulate: bool,
    weight_gain: f64,
}

impl ModConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        rng: &mut Rng,
        name: &str,
        group: ParamGroup,
        w_dim: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        demodulate: bool,
    ) -> Self {
        let affine = Linear::new(
            store,
            rng,
            &format!("{name}.affine"),
            group,
            w_dim,
            in_ch,
            Some(1.0),
            1.0,
        );
        let weight = store.add(
            format!("{name}.weight"),
            group,
            normal_tensor(rng, &[out_ch, in_ch, kernel, kernel]),
        );
        Self {
            affine,
            weight,
            kernel,
            demodulate,
            weight_gain: 1.0 / libm::sqrt((in_ch * kernel * kernel) as f64),
        }
    }

    /// `x: [N, C, H, W]`, `w: [N, w_dim]` -> `[N, O, H, W]`.
    pub fn forward<S: Real>(&self, g: &mut Graph<S>, x: Var, w: Var) -> Var {
        let styles = self.affine.forward(g, w);
        let xs = g.scale_channels(x, styles);
        let weight = g.param(self.weight);
        let y = g.conv2d(xs, weight, 1, self.kernel / 2);
        let y = g.scale(y, self.weight_gain);
        if !self.demodulate {
            return y;
        }
        let shape = g.shape(weight).to_vec();
        let (o, c) = (shape[0], shape[1]);
        let w2 = g.square(weight);
        let w2 = g.sum_to(w2, &[o, c, 1, 1]);
        let w2 = g.reshape(w2, &[o, c]);
        let w2 = g.transpose(w2);
        let s2 = g.square(styles);
        let energy = g.matmul(s2, w2);
        let energy = g.affine(energy, self.weight_gain * self.weight_gain, 1e-8);
        let d = g.rsqrt(energy);
        g.scale_channels(y, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GroupSet;
    use crate::rng::seeded;

    #[test]
    fn demodulated_output_has_unit_scale_for_white_input() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(1);
        let layer = ModConv::new(&mut store, &mut rng, "m", ParamGroup::Synthesis, 8, 16, 16, 3, true);
        let x: Tensor<f64> = normal_tensor(&mut rng, &[2, 16, 16, 16]);
        let w: Tensor<f64> = normal_tensor(&mut rng, &[2, 8]);
        let mut g = Graph::with_params(&store, GroupSet::NONE);
        let (xv, wv) = (g.constant(x), g.constant(w));
        let y = layer.forward(&mut g, xv, wv);
        let t = g.value(y);
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        // Interior pixels have unit variance; zero padding lowers the border.
        assert!(var > 0.7 && var < 1.2, "variance {var}");
    }

    #[test]
    fn linear_shapes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = seeded(2);
        let l = Linear::new(&mut store, &mut rng, "l", ParamGroup::Mapping, 5, 3, Some(0.0), 0.01);
        let mut g = Graph::with_params(&store, GroupSet::NONE);
        let x = g.constant(Tensor::ones(&[4, 5]));
        let y = l.forward(&mut g, x);
        assert_eq!(g.shape(y), &[4, 3]);
    }
}
