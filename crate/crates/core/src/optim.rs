//! Adaptive-moment optimizer with per-group learning-rate multipliers.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamGrads;
use crate::nn::{ParamGroup, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<S> {
    m: Tensor<S>,
    v: Tensor<S>,
    t: u64,
}

/// Adam. Only parameters that appear in the gradient set of a call are
/// touched; everything else stays bit-identical.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    lr_scale: f64,
    group_mul: Vec<(ParamGroup, f64)>,
    state: Vec<Option<Moments<S>>>,
    steps: u64,
}

impl<S: Real> Adam<S> {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        let mut state = Vec::new();
        state.resize_with(n_params, || None);
        Self {
            config,
            lr_scale: 1.0,
            group_mul: Vec::new(),
            state,
            steps: 0,
        }
    }

    /// Multiplies the learning rate of every parameter in `group`.
    pub fn with_group_lr(mut self, group: ParamGroup, mul: f64) -> Self {
        self.group_mul.retain(|(g, _)| *g != group);
        self.group_mul.push((group, mul));
        self
    }

    /// Global learning-rate factor (used by divergence back-off).
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }

    pub fn lr_scale(&self) -> f64 {
        self.lr_scale
    }

    /// Number of update calls so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    fn group_lr(&self, group: ParamGroup) -> f64 {
        let mul = self
            .group_mul
            .iter()
            .find(|(g, _)| *g == group)
            .map_or(1.0, |(_, m)| *m);
        self.config.lr * self.lr_scale * mul
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &ParamGrads<S>) {
        self.steps += 1;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let (sb1, sb2, eps) = (S::lit(b1), S::lit(b2), S::lit(self.config.eps));
        for (id, grad) in grads.iter() {
            let lr = self.group_lr(store.group(*id));
            let slot = &mut self.state[id.0];
            let mom = slot.get_or_insert_with(|| Moments {
                m: Tensor::zeros(grad.shape()),
                v: Tensor::zeros(grad.shape()),
                t: 0,
            });
            mom.t += 1;
            let bc1 = 1.0 - libm::pow(b1, mom.t as f64);
            let bc2 = 1.0 - libm::pow(b2, mom.t as f64);
            let step = S::lit(lr / bc1);
            let bc2 = S::lit(bc2);
            let param = store.get_mut(*id);
            for (((p, &gr), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(mom.m.data_mut())
                .zip(mom.v.data_mut())
            {
                *m = sb1 * *m + (S::one() - sb1) * gr;
                *v = sb2 * *v + (S::one() - sb2) * gr * gr;
                *p -= step * *m / ((*v / bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic_and_skips_absent_params() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", ParamGroup::Encoder, Tensor::full(&[3], 5.0));
        let b = store.add("b", ParamGroup::Synthesis, Tensor::full(&[1], 1.0));
        let mut opt = Adam::new(
            AdamConfig {
                lr: 0.1,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            store.len(),
        );
        for _ in 0..500 {
            let mut g = ParamGrads::new();
            let grad = store.get(a).map(|v| 2.0 * v);
            g.add(a, &grad, 1.0);
            opt.step(&mut store, &g);
        }
        assert!(store.get(a).max_abs() < 1e-2);
        assert_eq!(store.get(b).data(), &[1.0]);
        assert_eq!(opt.steps(), 500);
    }

    #[test]
    fn group_multiplier_scales_first_step() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", ParamGroup::LabelBranch, Tensor::zeros(&[1]));
        let b = store.add("b", ParamGroup::Synthesis, Tensor::zeros(&[1]));
        let mut opt = Adam::new(AdamConfig::default(), 2).with_group_lr(ParamGroup::Synthesis, 0.1);
        let mut g = ParamGrads::new();
        g.add(a, &Tensor::full(&[1], 1.0), 1.0);
        g.add(b, &Tensor::full(&[1], 1.0), 1.0);
        opt.step(&mut store, &g);
        let (da, db) = (store.get(a).item(), store.get(b).item());
        assert!((db / da - 0.1).abs() < 1e-9);
    }
}
