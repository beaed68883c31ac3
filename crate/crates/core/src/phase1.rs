//! Adversarial training of the generator and discriminator on images of both
//! domains: non-saturating logistic loss, lazy R1 penalty on reals, EMA copy
//! of the generator, checkpoint rollback on divergence.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGrads};
use crate::data::MixedSampler;
use crate::nets::Networks;
use crate::nn::{GroupSet, ParamGroup, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, normal_tensor, seeded, Rng};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase1Config {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub r1_gamma: f64,
    /// The R1 penalty is applied every `r1_interval` discriminator steps,
    /// scaled by the interval.
    pub r1_interval: u64,
    /// Finite-difference step for the R1 Hessian-vector product, relative
    /// to the largest input-gradient entry.
    pub r1_fd_step: f64,
    pub ema_decay: f64,
    /// Decay of the running latent mean.
    pub w_avg_beta: f64,
    pub checkpoint_every: u64,
    pub max_rollbacks: u32,
    pub log_every: u64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            batch_size: 4,
            lr_g: 2e-3,
            lr_d: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            r1_gamma: 10.0,
            r1_interval: 16,
            r1_fd_step: 1e-2,
            ema_decay: 0.999,
            w_avg_beta: 0.995,
            checkpoint_every: 1000,
            max_rollbacks: 2,
            log_every: 100,
            augment: true,
            seed: 0,
        }
    }
}

impl Phase1Config {
    pub fn paper() -> Self {
        Self {
            iterations: 250_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [self.lr_g, self.lr_d, self.r1_gamma, self.r1_fd_step, self.ema_decay, self.w_avg_beta];
        if self.iterations == 0
            || self.batch_size < 2
            || self.r1_interval == 0
            || self.checkpoint_every == 0
            || self.log_every == 0
            || pos.iter().any(|&v| !(v > 0.0 && v.is_finite()))
        {
            return Err(Error::Config(
                "phase1: iterations, learning rates, r1 settings, decays and intervals must be positive; batch_size >= 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.ema_decay >= 1.0 || self.w_avg_beta >= 1.0 {
            return Err(Error::Config("phase1: betas and decays must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase1Scalars {
    pub iteration: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    /// Most recent R1 penalty value (before interval scaling).
    pub r1: f64,
    pub d_real: f64,
    pub d_fake: f64,
}

impl Phase1Scalars {
    pub fn all_finite(&self) -> bool {
        [self.loss_d, self.loss_g, self.r1, self.d_real, self.d_fake].iter().all(|v| v.is_finite())
    }
}

/// Everything that a rollback restores.
#[derive(Clone, Debug)]
pub struct Phase1State<S> {
    pub store: ParamStore<S>,
    /// Averaged generator; other groups mirror `store`.
    pub ema: ParamStore<S>,
    pub opt_g: Adam<S>,
    pub opt_d: Adam<S>,
    pub iteration: u64,
    pub rng: Rng,
    pub last_r1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Step(Phase1Scalars),
    /// A non-finite value was met; the state went back to `to_iteration`
    /// and the learning rates were halved.
    RolledBack { to_iteration: u64, lr_scale: f64 },
}

pub enum Phase1Event<'a, S> {
    Logged(&'a Phase1Scalars),
    Checkpoint(&'a Phase1State<S>),
    RolledBack { to_iteration: u64, lr_scale: f64 },
}

pub fn generator_groups() -> GroupSet {
    GroupSet::of(&[ParamGroup::Mapping, ParamGroup::Synthesis])
}

pub fn discriminator_groups() -> GroupSet {
    GroupSet::of(&[ParamGroup::Discriminator])
}

fn softplus_mean<S: Real>(g: &mut Graph<S>, x: crate::autograd::Var, sign: f64) -> crate::autograd::Var {
    let y = g.scale(x, sign);
    let y = g.softplus(y);
    g.mean_all(y)
}

pub struct Phase1Trainer<S> {
    pub nets: Networks,
    pub cfg: Phase1Config,
    pub state: Phase1State<S>,
    snapshot: Phase1State<S>,
    pub rollbacks: u32,
    pub lr_scale: f64,
    pub history: Vec<Phase1Scalars>,
}

impl<S: Real> Phase1Trainer<S> {
    pub fn new(nets: Networks, store: ParamStore<S>, cfg: Phase1Config) -> Result<Self> {
        cfg.validate()?;
        let n = store.len();
        let adam = |lr| {
            Adam::new(
                AdamConfig {
                    lr,
                    beta1: cfg.beta1,
                    beta2: cfg.beta2,
                    eps: 1e-8,
                },
                n,
            )
        };
        let state = Phase1State {
            ema: store.clone(),
            store,
            opt_g: adam(cfg.lr_g),
            opt_d: adam(cfg.lr_d),
            iteration: 0,
            rng: seeded(derive_seed(cfg.seed, 0x0050_4831)),
            last_r1: 0.0,
        };
        Ok(Self {
            nets,
            snapshot: state.clone(),
            state,
            cfg,
            rollbacks: 0,
            lr_scale: 1.0,
            history: Vec::new(),
        })
    }

    fn fakes(&mut self, n: usize) -> Result<Tensor<S>> {
        let st = &mut self.state;
        let z = normal_tensor(&mut st.rng, &[n, self.nets.arch.z_dim]);
        let mut g = Graph::with_params(&st.store, GroupSet::NONE);
        let zv = g.constant(z);
        let out = self.nets.generate(&mut g, zv, Some(&mut st.rng))?;
        Ok(g.value(out.image).clone())
    }

    /// R1 penalty `γ/2 · mean ||∇x D(x)||²` on `real` and its parameter
    /// gradient, via a central difference of `∇θ D` along `∇x D`.
    pub fn r1_penalty(&self, real: &Tensor<S>) -> (f64, ParamGrads<S>) {
        let store = &self.state.store;
        let d = &self.nets.discriminator;
        let n = real.dim(0) as f64;
        let gx = {
            let mut g = Graph::with_params(store, GroupSet::NONE);
            let x = g.input(real.clone());
            let y = d.forward(&mut g, x);
            let s = g.sum_all(y);
            g.backward(s).wrt(x).cloned().unwrap_or_else(|| Tensor::zeros(real.shape()))
        };
        let sq: f64 = gx.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
        let penalty = 0.5 * self.cfg.r1_gamma * sq / n;
        let mut grads = ParamGrads::new();
        let max = gx.max_abs().as_f64();
        if !(max > 0.0) {
            return (penalty, grads);
        }
        let eps = self.cfg.r1_fd_step / max;
        let scale = self.cfg.r1_gamma * self.cfg.r1_interval as f64 / (n * 2.0 * eps);
        for sign in [1.0, -1.0] {
            let e = S::lit(sign * eps);
            let xs = real.zip_map(&gx, |a, b| a + e * b);
            let mut g = Graph::with_params(store, discriminator_groups());
            let x = g.constant(xs);
            let y = d.forward(&mut g, x);
            let s = g.sum_all(y);
            grads.accumulate(&g.backward(s), S::lit(sign * scale));
        }
        (penalty, grads)
    }

    /// One discriminator update. Returns `(loss_d, d_real, d_fake, r1)`.
    pub fn d_step(&mut self, real: &Tensor<S>) -> Result<(f64, f64, f64, Option<f64>)> {
        self.nets.check_images(real)?;
        let fake = self.fakes(real.dim(0))?;
        let (loss, dr, df, mut grads) = {
            let mut g = Graph::with_params(&self.state.store, discriminator_groups());
            let xr = g.constant(real.clone());
            let xf = g.constant(fake);
            let yr = self.nets.discriminator.forward(&mut g, xr);
            let yf = self.nets.discriminator.forward(&mut g, xf);
            let lr = softplus_mean(&mut g, yr, -1.0);
            let lf = softplus_mean(&mut g, yf, 1.0);
            let loss = g.add(lr, lf);
            let mut grads = ParamGrads::new();
            grads.accumulate(&g.backward(loss), S::one());
            (g.value(loss).item().as_f64(), g.value(yr).mean().as_f64(), g.value(yf).mean().as_f64(), grads)
        };
        let mut r1 = None;
        if self.state.iteration.is_multiple_of(self.cfg.r1_interval) {
            let (p, rg) = self.r1_penalty(real);
            for (id, t) in rg.iter() {
                grads.add(*id, t, S::one());
            }
            r1 = Some(p);
        }
        if !loss.is_finite() || !grads.all_finite() || r1.is_some_and(|v| !v.is_finite()) {
            return Err(self.diverged("discriminator loss"));
        }
        self.state.opt_d.step(&mut self.state.store, &grads);
        Ok((loss, dr, df, r1))
    }

    /// One generator update. Returns `loss_g`.
    pub fn g_step(&mut self, n: usize) -> Result<f64> {
        let st = &mut self.state;
        let z = normal_tensor(&mut st.rng, &[n, self.nets.arch.z_dim]);
        let (loss, w_mean, grads) = {
            let mut g = Graph::with_params(&st.store, generator_groups());
            let zv = g.constant(z);
            let w = self.nets.generator.mapping.forward(&mut g, zv);
            let ws = self.nets.broadcast_w(&mut g, w);
            let out = self.nets.generator.synthesis.forward(&mut g, ws, Some(&mut st.rng), &[])?;
            let y = self.nets.discriminator.forward(&mut g, out.image);
            let loss = softplus_mean(&mut g, y, -1.0);
            let mut grads = ParamGrads::new();
            grads.accumulate(&g.backward(loss), S::one());
            let wd = self.nets.arch.w_dim;
            let wv = g.value(w);
            let w_mean: Vec<f64> = (0..wd)
                .map(|k| (0..n).map(|i| wv.data()[i * wd + k].as_f64()).sum::<f64>() / n as f64)
                .collect();
            (g.value(loss).item().as_f64(), w_mean, grads)
        };
        if !loss.is_finite() || !grads.all_finite() {
            return Err(self.diverged("generator loss"));
        }
        let st = &mut self.state;
        st.opt_g.step(&mut st.store, &grads);
        let id = self.nets.generator.w_avg;
        let beta = self.cfg.w_avg_beta;
        let avg = st.store.get_mut(id);
        for (a, m) in avg.data_mut().iter_mut().zip(&w_mean) {
            *a = S::lit(m + (a.as_f64() - m) * beta);
        }
        Ok(loss)
    }

    fn diverged(&self, what: &str) -> Error {
        Error::TrainingDiverged {
            iteration: self.state.iteration,
            what: what.into(),
        }
    }

    /// EMA of the generator groups with warm-up `min(decay, (1+t)/(10+t))`;
    /// everything else is copied.
    pub fn update_ema(&mut self) {
        let t = self.state.iteration as f64;
        let beta = S::lit(self.cfg.ema_decay.min((1.0 + t) / (10.0 + t)));
        let st = &mut self.state;
        for (id, p) in st.store.iter() {
            let e = st.ema.get_mut(id);
            if GroupSet::generator().contains(p.group) {
                for (ev, &pv) in e.data_mut().iter_mut().zip(p.value.data()) {
                    *ev = pv + (*ev - pv) * beta;
                }
            } else {
                e.data_mut().copy_from_slice(p.value.data());
            }
        }
    }

    /// One D update followed by one G update and the EMA update.
    pub fn step(&mut self, real: &Tensor<S>) -> Result<Phase1Scalars> {
        let (loss_d, d_real, d_fake, r1) = self.d_step(real)?;
        if let Some(r) = r1 {
            self.state.last_r1 = r;
        }
        let loss_g = self.g_step(real.dim(0))?;
        self.update_ema();
        self.state.iteration += 1;
        Ok(Phase1Scalars {
            iteration: self.state.iteration,
            loss_d,
            loss_g,
            r1: self.state.last_r1,
            d_real,
            d_fake,
        })
    }

    /// A step with rollback handling. A divergence restores the last
    /// checkpoint and halves both learning rates, at most `max_rollbacks`
    /// times per run.
    pub fn train_iteration(&mut self, real: &Tensor<S>) -> Result<StepOutcome> {
        match self.step(real) {
            Ok(s) => {
                if self.state.iteration.is_multiple_of(self.cfg.checkpoint_every) {
                    self.snapshot = self.state.clone();
                }
                Ok(StepOutcome::Step(s))
            }
            Err(e @ Error::TrainingDiverged { .. }) => {
                if self.rollbacks >= self.cfg.max_rollbacks {
                    return Err(e);
                }
                self.rollbacks += 1;
                self.lr_scale *= 0.5;
                self.state = self.snapshot.clone();
                self.state.opt_g.set_lr_scale(self.lr_scale);
                self.state.opt_d.set_lr_scale(self.lr_scale);
                self.history.retain(|h| h.iteration <= self.snapshot.iteration);
                log::warn!("phase1 diverged ({e}); rolled back to iteration {}", self.state.iteration);
                Ok(StepOutcome::RolledBack {
                    to_iteration: self.state.iteration,
                    lr_scale: self.lr_scale,
                })
            }
            Err(e) => Err(e),
        }
    }

    /// Trains until `cfg.iterations`, drawing mixed-domain batches.
    pub fn run(&mut self, sampler: &MixedSampler<S>, observer: &mut dyn FnMut(Phase1Event<'_, S>)) -> Result<()> {
        let mut data_rng = seeded(derive_seed(self.cfg.seed, 0x0044_4154));
        while self.state.iteration < self.cfg.iterations {
            let batch = sampler.mixed(&mut data_rng, self.cfg.batch_size)?;
            match self.train_iteration(&batch.images)? {
                StepOutcome::Step(s) => {
                    if s.iteration % self.cfg.log_every == 0 || s.iteration == self.cfg.iterations {
                        self.history.push(s);
                        observer(Phase1Event::Logged(&s));
                    }
                    if s.iteration % self.cfg.checkpoint_every == 0 {
                        observer(Phase1Event::Checkpoint(&self.state));
                    }
                }
                StepOutcome::RolledBack { to_iteration, lr_scale } => {
                    observer(Phase1Event::RolledBack { to_iteration, lr_scale });
                }
            }
        }
        Ok(())
    }
}

/// `n` images from the generator parameters in `store` (the EMA copy after
/// training), noise off; a pure function of `seed`.
pub fn sample_generator<S: Real>(nets: &Networks, store: &ParamStore<S>, n: usize, seed: u64) -> Result<Tensor<S>> {
    let size = nets.arch.image_size;
    if n == 0 {
        return Ok(Tensor::zeros(&[0, 1, size, size]));
    }
    let mut rng = seeded(seed);
    let z = normal_tensor(&mut rng, &[n, nets.arch.z_dim]);
    let mut g = Graph::with_params(store, GroupSet::NONE);
    let zv = g.constant(z);
    let out = nets.generate(&mut g, zv, None)?;
    Ok(g.value(out.image).clone())
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { 1.0 };
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Fraction of correct real/fake decisions (logit sign) over both batches.
pub fn d_accuracy<S: Real>(nets: &Networks, store: &ParamStore<S>, real: &Tensor<S>, fake: &Tensor<S>) -> Result<f64> {
    let r = nets.discriminate(store, real)?;
    let f = nets.discriminate(store, fake)?;
    let correct = r.iter().filter(|v| v.as_f64() > 0.0).count() + f.iter().filter(|v| v.as_f64() < 0.0).count();
    Ok(correct as f64 / (r.len() + f.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ArchConfig;

    fn tiny() -> ArchConfig {
        let mut a = ArchConfig::desk(8);
        a.z_dim = 8;
        a.w_dim = 8;
        a.mapping_layers = 2;
        a.channels = vec![4, 4];
        a.label_hidden = (4, 4);
        a.perceptual_channels = vec![2, 2, 2, 2];
        a
    }

    fn trainer<S: Real>(cfg: Phase1Config) -> Phase1Trainer<S> {
        let (nets, store) = Networks::new::<S>(&tiny(), 1).unwrap();
        Phase1Trainer::new(nets, store, cfg).unwrap()
    }

    fn reals<S: Real>() -> Tensor<S> {
        Tensor::from_fn(&[2, 1, 8, 8], |i| S::lit(if (i / 8) % 2 == 0 { 0.8 } else { -0.6 }))
    }

    #[test]
    fn config_validation() {
        Phase1Config::default().validate().unwrap();
        let bad = Phase1Config {
            batch_size: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn routing_is_bit_exact() {
        let mut t = trainer::<f32>(Phase1Config::default());
        let before = t.state.store.clone();
        t.d_step(&reals()).unwrap();
        for (id, p) in before.iter() {
            let changed = p.value != *t.state.store.get(id);
            match p.group {
                ParamGroup::Discriminator => {}
                _ => assert!(!changed, "{} changed in D step", p.name),
            }
        }
        let before = t.state.store.clone();
        t.g_step(2).unwrap();
        for (id, p) in before.iter() {
            let changed = p.value != *t.state.store.get(id);
            if matches!(p.group, ParamGroup::Discriminator | ParamGroup::Encoder | ParamGroup::LabelBranch) {
                assert!(!changed, "{} changed in G step", p.name);
            }
        }
        assert_ne!(before.get(t.nets.generator.w_avg), t.state.store.get(t.nets.generator.w_avg));
    }

    #[test]
    fn r1_gradient_matches_finite_difference_of_penalty() {
        let cfg = Phase1Config {
            r1_interval: 1,
            r1_fd_step: 1e-5,
            ..Default::default()
        };
        let mut t = trainer::<f64>(cfg);
        let real = reals::<f64>();
        let (p0, grads) = t.r1_penalty(&real);
        assert!(p0 >= 0.0);
        let (id, analytic) = grads.iter().find(|(id, _)| t.state.store.get(*id).len() > 4).map(|(i, g)| (*i, g.clone())).unwrap();
        for k in 0..3 {
            let h = 1e-5;
            let orig = t.state.store.get(id).data()[k];
            t.state.store.get_mut(id).data_mut()[k] = orig + h;
            let (pp, _) = t.r1_penalty(&real);
            t.state.store.get_mut(id).data_mut()[k] = orig - h;
            let (pm, _) = t.r1_penalty(&real);
            t.state.store.get_mut(id).data_mut()[k] = orig;
            let fd = (pp - pm) / (2.0 * h);
            let a = analytic.data()[k];
            assert!((a - fd).abs() <= 1e-3 * a.abs().max(fd.abs()).max(1e-8), "{a} vs {fd}");
        }
    }

    #[test]
    fn steps_are_deterministic_and_finite() {
        let run = || {
            let mut t = trainer::<f32>(Phase1Config::default());
            (0..3).map(|_| t.step(&reals()).unwrap()).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().all(|s| s.all_finite() && s.r1 >= 0.0));
    }

    #[test]
    fn divergence_rolls_back_then_fails() {
        let mut t = trainer::<f32>(Phase1Config {
            max_rollbacks: 1,
            ..Default::default()
        });
        t.step(&reals()).unwrap();
        let bad = Tensor::full(&[2, 1, 8, 8], f32::NAN);
        match t.train_iteration(&bad).unwrap() {
            StepOutcome::RolledBack { to_iteration, lr_scale } => {
                assert_eq!((to_iteration, lr_scale), (0, 0.5));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(t.state.iteration, 0);
        assert!(matches!(t.train_iteration(&bad), Err(Error::TrainingDiverged { .. })));
    }

    #[test]
    fn sampling_and_ks() {
        let t = trainer::<f32>(Phase1Config::default());
        assert_eq!(sample_generator(&t.nets, &t.state.ema, 0, 1).unwrap().dim(0), 0);
        let a = sample_generator(&t.nets, &t.state.ema, 3, 7).unwrap();
        assert_eq!(a, sample_generator(&t.nets, &t.state.ema, 3, 7).unwrap());
        assert_eq!(ks_statistic(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(ks_statistic(&[0.0, 0.1], &[1.0, 2.0]), 1.0);
        assert!((ks_statistic(&[1.0, 2.0, 3.0, 4.0], &[3.0, 4.0, 5.0, 6.0]) - 0.5).abs() < 1e-12);
    }
}
