//! Encoder training on top of the frozen adversarial pair: intra-domain
//! reconstruction plus cyclic translation through the opposite domain, with
//! segmentation supervision wherever a mask is known.
//!
//! Reconstruction losses update the encoder only. Segmentation losses update
//! the encoder, the label branch and (at a reduced rate) the synthesis
//! layers. The discriminator and mapping network never change.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGrads, Var};
use crate::data::{Batch, MixedSampler, TrainItem};
use crate::domain::DomainLabel;
use crate::infer::{argmax_classes, predict};
use crate::losses::{loss_r, loss_s, LossWeights};
use crate::metrics::dice;
use crate::nets::Networks;
use crate::nn::{GroupSet, ParamGroup, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, seeded, Rng};
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Training configurations: reconstruction with the matching label (2.1),
/// and the two translate-and-return cycles (2.2 then 2.3 on source inputs,
/// 2.3 then 2.2 on target inputs).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Configuration {
    Recon,
    SourceCycle,
    TargetCycle,
}

impl Configuration {
    pub const ALL: [Configuration; 3] = [Configuration::Recon, Configuration::SourceCycle, Configuration::TargetCycle];

    pub fn as_str(self) -> &'static str {
        match self {
            Configuration::Recon => "2.1",
            Configuration::SourceCycle => "2.2-2.3",
            Configuration::TargetCycle => "2.3-2.2",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase2Config {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_label: f64,
    /// Synthesis-layer learning rate relative to `lr_label`.
    pub synthesis_lr_mul: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub schedule: Vec<Configuration>,
    /// Cut the graph between the two passes of a cycle and supervise only
    /// the second one.
    pub last_pass_only: bool,
    /// Steps before joint training in which segmentation losses reach the
    /// label branch only, on annotated images.
    pub warmup_steps: u64,
    /// Chance of drawing an annotated target image in target batches.
    pub labeled_fraction: f64,
    pub val_every: u64,
    pub log_every: u64,
    pub max_rollbacks: u32,
    pub augment: bool,
    pub seed: u64,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 4,
            lr_encoder: 1e-3,
            lr_label: 1e-3,
            synthesis_lr_mul: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            weights: LossWeights::default(),
            schedule: Configuration::ALL.to_vec(),
            last_pass_only: false,
            warmup_steps: 500,
            labeled_fraction: 0.5,
            val_every: 250,
            log_every: 50,
            max_rollbacks: 2,
            augment: true,
            seed: 0,
        }
    }
}

impl Phase2Config {
    pub fn paper() -> Self {
        Self {
            iterations: 50_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.mse, w.perceptual, w.dice, w.ce].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("phase2: loss weights must be finite and >= 0".into()));
        }
        if Configuration::ALL.iter().any(|c| !self.schedule.contains(c)) {
            return Err(Error::Config("phase2: schedule must contain recon, source_cycle and target_cycle".into()));
        }
        let pos = [self.lr_encoder, self.lr_label, self.synthesis_lr_mul];
        if self.iterations == 0 || self.batch_size == 0 || self.val_every == 0 || self.log_every == 0 || pos.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config("phase2: iterations, batch size, intervals and learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(0.0..=1.0).contains(&self.labeled_fraction) {
            return Err(Error::Config("phase2: betas must lie in [0, 1) and labeled_fraction in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn configuration_at(&self, step: u64) -> Configuration {
        self.schedule[(step % self.schedule.len() as u64) as usize]
    }
}

pub fn encoder_groups() -> GroupSet {
    GroupSet::of(&[ParamGroup::Encoder])
}

pub fn segmentation_groups() -> GroupSet {
    GroupSet::of(&[ParamGroup::Encoder, ParamGroup::LabelBranch, ParamGroup::Synthesis])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase2Scalars {
    pub iteration: u64,
    pub configuration: Configuration,
    pub warmup: bool,
    pub loss_r: f64,
    pub loss_s: Option<f64>,
    pub labeled: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub iteration: u64,
    /// Mean vessel Dice over the validation slices.
    pub dice: f64,
    /// Mean reconstruction MSE over the validation slices.
    pub recon_mse: f64,
    /// Mean `loss_R` between each slice and its full cycle.
    pub cycle_loss: f64,
}

#[derive(Clone, Debug)]
pub struct Phase2State<S> {
    pub store: ParamStore<S>,
    pub opt: Adam<S>,
    /// Joint steps taken (warm-up excluded).
    pub iteration: u64,
    pub warmup_done: u64,
    pub rng: Rng,
}

pub enum Phase2Event<'a> {
    Logged(&'a Phase2Scalars),
    Validated(&'a Validation),
    RolledBack { to_iteration: u64, lr_scale: f64 },
}

/// Loss values and gradients of one step before the update.
pub struct StepGrads<S> {
    pub loss_r: f64,
    pub loss_s: Option<f64>,
    pub labeled: usize,
    pub grads: ParamGrads<S>,
}

fn labels_of(batch_domains: &[DomainLabel]) -> Vec<DomainLabel> {
    batch_domains.to_vec()
}

fn flipped(d: &[DomainLabel]) -> Vec<DomainLabel> {
    d.iter().map(|l| l.flip()).collect()
}

/// Forward and backward of one configuration on `batch`. Reconstruction
/// gradients are kept for `r_groups`, segmentation gradients for `s_groups`.
pub fn compute_step<S: Real>(
    nets: &Networks,
    store: &ParamStore<S>,
    batch: &Batch<S>,
    configuration: Configuration,
    cfg: &Phase2Config,
    r_groups: GroupSet,
    s_groups: GroupSet,
) -> Result<StepGrads<S>> {
    nets.check_images(&batch.images)?;
    let mut g = Graph::with_params(store, segmentation_groups());
    let x = g.constant(batch.images.clone());
    let own = labels_of(&batch.domains);
    let mut supervised: Vec<Var> = Vec::new();
    let x_hat = match configuration {
        Configuration::Recon => {
            let p = nets.pass(&mut g, x, &own)?;
            supervised.push(p.logits);
            p.image
        }
        Configuration::SourceCycle | Configuration::TargetCycle => {
            let first = nets.pass(&mut g, x, &flipped(&own))?;
            let mid = if cfg.last_pass_only {
                let v = g.value(first.image).clone();
                g.constant(v)
            } else {
                supervised.push(first.logits);
                first.image
            };
            let second = nets.pass(&mut g, mid, &own)?;
            supervised.push(second.logits);
            second.image
        }
    };
    let lr = loss_r(&mut g, &nets.perceptual, x, x_hat, &cfg.weights)?;
    let mut grads = ParamGrads::new();
    grads.accumulate_groups(&g.backward(lr), S::one(), store, r_groups);
    let loss_r_value = g.value(lr).item().as_f64();

    let labeled = batch.labeled_rows.len();
    let seg_on = labeled > 0 && (cfg.weights.dice > 0.0 || cfg.weights.ce > 0.0) && s_groups != GroupSet::NONE;
    let mut loss_s_value = None;
    if let (true, Some(y)) = (seg_on, &batch.labels) {
        let mut total: Option<Var> = None;
        for logits in supervised {
            let rows = g.gather0(logits, &batch.labeled_rows);
            let l = loss_s(&mut g, rows, y, &cfg.weights)?;
            total = Some(match total {
                Some(t) => g.add(t, l),
                None => l,
            });
        }
        if let Some(ls) = total {
            grads.accumulate_groups(&g.backward(ls), S::one(), store, s_groups);
            loss_s_value = Some(g.value(ls).item().as_f64());
        }
    }
    Ok(StepGrads {
        loss_r: loss_r_value,
        loss_s: loss_s_value,
        labeled,
        grads,
    })
}

pub struct Phase2Trainer<S> {
    pub nets: Networks,
    pub cfg: Phase2Config,
    pub state: Phase2State<S>,
    snapshot: Phase2State<S>,
    pub best: Option<(Validation, ParamStore<S>)>,
    pub rollbacks: u32,
    pub lr_scale: f64,
    pub history: Vec<Phase2Scalars>,
    pub validations: Vec<Validation>,
}

impl<S: Real> Phase2Trainer<S> {
    /// `store` holds the Phase 1 result; pass the EMA copy.
    pub fn new(nets: Networks, store: ParamStore<S>, cfg: Phase2Config) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(
            AdamConfig {
                lr: cfg.lr_encoder,
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: 1e-8,
            },
            store.len(),
        )
        .with_group_lr(ParamGroup::LabelBranch, cfg.lr_label / cfg.lr_encoder)
        .with_group_lr(ParamGroup::Synthesis, cfg.synthesis_lr_mul * cfg.lr_label / cfg.lr_encoder);
        let state = Phase2State {
            store,
            opt,
            iteration: 0,
            warmup_done: 0,
            rng: seeded(derive_seed(cfg.seed, 0x0050_4832)),
        };
        Ok(Self {
            nets,
            snapshot: state.clone(),
            state,
            cfg,
            best: None,
            rollbacks: 0,
            lr_scale: 1.0,
            history: Vec::new(),
            validations: Vec::new(),
        })
    }

    fn apply(&mut self, sg: &StepGrads<S>, what: &str) -> Result<()> {
        let finite = sg.loss_r.is_finite() && sg.loss_s.is_none_or(|v| v.is_finite()) && sg.grads.all_finite();
        if !finite {
            return Err(Error::TrainingDiverged {
                iteration: self.state.iteration,
                what: String::from(what),
            });
        }
        self.state.opt.step(&mut self.state.store, &sg.grads);
        Ok(())
    }

    /// One joint step on `batch` with the given configuration: exactly one
    /// optimizer update.
    pub fn step(&mut self, batch: &Batch<S>, configuration: Configuration) -> Result<Phase2Scalars> {
        let sg = compute_step(&self.nets, &self.state.store, batch, configuration, &self.cfg, encoder_groups(), segmentation_groups())?;
        self.apply(&sg, "phase2 loss")?;
        self.state.iteration += 1;
        Ok(Phase2Scalars {
            iteration: self.state.iteration,
            configuration,
            warmup: false,
            loss_r: sg.loss_r,
            loss_s: sg.loss_s,
            labeled: sg.labeled,
        })
    }

    /// Warm-up step: reconstruction updates the encoder, segmentation updates
    /// the label branch alone.
    pub fn warmup_step(&mut self, batch: &Batch<S>) -> Result<Phase2Scalars> {
        let lb = GroupSet::of(&[ParamGroup::LabelBranch]);
        let sg = compute_step(&self.nets, &self.state.store, batch, Configuration::Recon, &self.cfg, encoder_groups(), lb)?;
        self.apply(&sg, "phase2 warm-up loss")?;
        self.state.warmup_done += 1;
        Ok(Phase2Scalars {
            iteration: self.state.warmup_done,
            configuration: Configuration::Recon,
            warmup: true,
            loss_r: sg.loss_r,
            loss_s: sg.loss_s,
            labeled: sg.labeled,
        })
    }

    fn next_batch(&mut self, sampler: &MixedSampler<S>, configuration: Configuration) -> Result<Batch<S>> {
        let n = self.cfg.batch_size;
        let rng = &mut self.state.rng;
        match configuration {
            Configuration::Recon => sampler.mixed(rng, n),
            Configuration::SourceCycle if !sampler.source.is_empty() => sampler.from_domain(rng, DomainLabel::Source, n, None),
            Configuration::TargetCycle if !sampler.target.is_empty() => {
                sampler.from_domain(rng, DomainLabel::Target, n, Some(self.cfg.labeled_fraction))
            }
            _ => sampler.mixed(rng, n),
        }
    }

    fn warmup_batch(&mut self, sampler: &MixedSampler<S>) -> Result<Batch<S>> {
        let has_target_labels = sampler.target.iter().any(|t| t.labels.is_some());
        let use_target = has_target_labels && (sampler.source.is_empty() || self.state.warmup_done % 2 == 1);
        let rng = &mut self.state.rng;
        if use_target {
            sampler.from_domain(rng, DomainLabel::Target, self.cfg.batch_size, Some(1.0))
        } else {
            sampler.from_domain(rng, DomainLabel::Source, self.cfg.batch_size, None)
        }
    }

    fn rollback(&mut self, e: Error) -> Result<(u64, f64)> {
        if self.rollbacks >= self.cfg.max_rollbacks {
            return Err(e);
        }
        self.rollbacks += 1;
        self.lr_scale *= 0.5;
        self.state = self.snapshot.clone();
        self.state.opt.set_lr_scale(self.lr_scale);
        let keep = self.state.iteration;
        self.history.retain(|h| h.warmup || h.iteration <= keep);
        log::warn!("phase2 diverged ({e}); rolled back to iteration {keep}");
        Ok((keep, self.lr_scale))
    }

    /// Validation on annotated target slices.
    pub fn validate(&self, items: &[TrainItem<S>]) -> Result<Validation> {
        validate(&self.nets, &self.state.store, items, &self.cfg.weights, self.state.iteration)
    }

    /// Warm-up, then joint training to `cfg.iterations`. Validation runs every
    /// `val_every` steps when `val` is non-empty; the best store by vessel
    /// Dice is kept in `self.best`.
    pub fn run(&mut self, sampler: &MixedSampler<S>, val: &[TrainItem<S>], observer: &mut dyn FnMut(Phase2Event<'_>)) -> Result<()> {
        while self.state.warmup_done < self.cfg.warmup_steps {
            let b = self.warmup_batch(sampler)?;
            match self.warmup_step(&b) {
                Ok(s) => {
                    if s.iteration % self.cfg.log_every == 0 {
                        self.history.push(s.clone());
                        observer(Phase2Event::Logged(&s));
                    }
                }
                Err(e @ Error::TrainingDiverged { .. }) => {
                    let (to_iteration, lr_scale) = self.rollback(e)?;
                    observer(Phase2Event::RolledBack { to_iteration, lr_scale });
                }
                Err(e) => return Err(e),
            }
        }
        self.snapshot = self.state.clone();
        if !val.is_empty() && self.state.iteration == 0 {
            let v = self.validate(val)?;
            observer(Phase2Event::Validated(&v));
            self.validations.push(v);
        }
        while self.state.iteration < self.cfg.iterations {
            let c = self.cfg.configuration_at(self.state.iteration);
            let b = self.next_batch(sampler, c)?;
            match self.step(&b, c) {
                Ok(s) => {
                    let it = s.iteration;
                    if it % self.cfg.log_every == 0 || it == self.cfg.iterations {
                        self.history.push(s.clone());
                        observer(Phase2Event::Logged(&s));
                    }
                    if it % self.cfg.val_every == 0 || it == self.cfg.iterations {
                        self.snapshot = self.state.clone();
                        if !val.is_empty() {
                            let v = self.validate(val)?;
                            observer(Phase2Event::Validated(&v));
                            if self.best.as_ref().is_none_or(|(b, _)| v.dice > b.dice) {
                                self.best = Some((v.clone(), self.state.store.clone()));
                            }
                            self.validations.push(v);
                        }
                    }
                }
                Err(e @ Error::TrainingDiverged { .. }) => {
                    let (to_iteration, lr_scale) = self.rollback(e)?;
                    observer(Phase2Event::RolledBack { to_iteration, lr_scale });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// Best validated store if any, else the current one.
    pub fn final_store(&self) -> &ParamStore<S> {
        self.best.as_ref().map_or(&self.state.store, |(_, s)| s)
    }
}

/// Mean vessel Dice, reconstruction MSE and cycle loss over `items`.
pub fn validate<S: Real>(nets: &Networks, store: &ParamStore<S>, items: &[TrainItem<S>], weights: &LossWeights, iteration: u64) -> Result<Validation> {
    let mut dices = Vec::new();
    let (mut mse, mut cyc) = (0.0, 0.0);
    for it in items {
        let x = it.image.clone().reshape(&[1, 1, it.size(), it.size()])?;
        let d = [it.domain];
        let r = reconstruct(nets, store, &x, &d)?;
        mse += r.zip_map(&x, |a, b| (a - b) * (a - b)).mean().as_f64();
        let c = cycle(nets, store, &x, &d)?;
        let mut g = Graph::with_params(store, GroupSet::NONE);
        let (xv, cv) = (g.constant(x.clone()), g.constant(c));
        let l = loss_r(&mut g, &nets.perceptual, xv, cv, weights)?;
        cyc += g.value(l).item().as_f64();
        if let Some(y) = &it.labels {
            let pred = &predict(nets, store, &x, it.domain)?[0].mask;
            let gt = argmax_classes(y, it.size(), it.size());
            dices.push(dice(&pred.equal_to(2), &gt.equal_to(2))?);
        }
    }
    let n = items.len().max(1) as f64;
    Ok(Validation {
        iteration,
        dice: if dices.is_empty() { 0.0 } else { dices.iter().sum::<f64>() / dices.len() as f64 },
        recon_mse: mse / n,
        cycle_loss: cyc / n,
    })
}

fn encode_synthesize<S: Real>(nets: &Networks, store: &ParamStore<S>, x: &Tensor<S>, labels: &[DomainLabel]) -> Result<Tensor<S>> {
    nets.check_images(x)?;
    let mut g = Graph::with_params(store, GroupSet::NONE);
    let xv = g.constant(x.clone());
    let p = nets.pass(&mut g, xv, labels)?;
    Ok(g.value(p.image).clone())
}

/// Same-domain reconstruction of `x` with its own labels.
pub fn reconstruct<S: Real>(nets: &Networks, store: &ParamStore<S>, x: &Tensor<S>, domains: &[DomainLabel]) -> Result<Tensor<S>> {
    encode_synthesize(nets, store, x, domains)
}

/// Translation of `x` into the opposite domain.
pub fn translate<S: Real>(nets: &Networks, store: &ParamStore<S>, x: &Tensor<S>, domains: &[DomainLabel]) -> Result<Tensor<S>> {
    encode_synthesize(nets, store, x, &flipped(domains))
}

/// Translation to the opposite domain and back.
pub fn cycle<S: Real>(nets: &Networks, store: &ParamStore<S>, x: &Tensor<S>, domains: &[DomainLabel]) -> Result<Tensor<S>> {
    let t = translate(nets, store, x, domains)?;
    translate(nets, store, &t, &flipped(domains))
}
