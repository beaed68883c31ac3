//! Subcommand implementations over an output root laid out as
//!
//! ```text
//! data/raw/<split>/      generated phantoms
//! data/prep/<split>/     network-ready slices
//! phase1/  phase2/       checkpoints and logs
//! infer/<split>/         predicted label maps and overlays
//! sato/<split>/          baseline label maps
//! eval/<name>/           metric reports
//! figures/               projections and overlays
//! manifests/             one manifest per command run
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use vesselda_core::data::{MixedSampler, TrainItem};
use vesselda_core::domain::DomainLabel;
use vesselda_core::image::{Image, LabelImage};
use vesselda_core::infer::Segmenter;
use vesselda_core::metrics::{aggregate, evaluate_volume, MetricsReport};
use vesselda_core::nets::Networks;
use vesselda_core::phase1::{ks_statistic, sample_generator, Phase1Event, Phase1Trainer};
use vesselda_core::phase2::{Phase2Event, Phase2Trainer};
use vesselda_core::preproc::{preprocess_slice, NormalizedSlice};
use vesselda_core::rng::derive_seed;
use vesselda_core::sato::segment_sato;
use vesselda_core::synthgen::{make_split, LabeledSample, Polarity};
use vesselda_core::tensor::Tensor;

use crate::checkpoint::{self, CheckpointManifest};
use crate::config::RunConfig;
use crate::container::{self, image_stem, labels_stem, stem_id, Sidecar};
use crate::figures;
use crate::manifest::{hash_file, now_secs, rel, write_json, RunLock, RunManifest, RunStatus};

pub const SPLITS: [&str; 6] = ["source_labeled", "target_unlabeled", "target_labeled", "val", "test_source", "test_target"];
pub const TEST_SPLITS: [&str; 2] = ["test_target", "test_source"];

const STREAM_NETS: u64 = 0x4e45_5453;
const STREAM_PHASE1: u64 = 0x5048_0001;
const STREAM_PHASE2: u64 = 0x5048_0002;
const STREAM_KS: u64 = 0x4b53;

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }
    pub fn raw(&self, split: &str) -> PathBuf {
        self.root.join("data/raw").join(split)
    }
    pub fn prep(&self, split: &str) -> PathBuf {
        self.root.join("data/prep").join(split)
    }
    pub fn phase1(&self) -> PathBuf {
        self.root.join("phase1")
    }
    pub fn phase1_ckpt(&self) -> PathBuf {
        self.phase1().join("ckpt")
    }
    pub fn phase2(&self) -> PathBuf {
        self.root.join("phase2")
    }
    pub fn phase2_ckpt(&self) -> PathBuf {
        self.phase2().join("ckpt")
    }
    pub fn infer(&self, split: &str) -> PathBuf {
        self.root.join("infer").join(split)
    }
    pub fn sato(&self, split: &str) -> PathBuf {
        self.root.join("sato").join(split)
    }
    pub fn eval(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(name)
    }
    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }
    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }
}

/// Book-keeping of one command run.
pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub layout: Layout,
    inputs: BTreeMap<String, String>,
    artifacts: Vec<String>,
    pub summary: BTreeMap<String, f64>,
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a RunConfig, root: &Path) -> Self {
        Self {
            cfg,
            layout: Layout::new(root),
            inputs: BTreeMap::new(),
            artifacts: Vec::new(),
            summary: BTreeMap::new(),
        }
    }

    fn input(&mut self, p: &Path) -> Result<()> {
        if let std::collections::btree_map::Entry::Vacant(e) = self.inputs.entry(rel(&self.layout.root, p)) {
            e.insert(hash_file(p)?);
        }
        Ok(())
    }

    fn artifact(&mut self, p: &Path) {
        let key = rel(&self.layout.root, p);
        if !self.artifacts.contains(&key) {
            self.artifacts.push(key);
        }
    }

    fn artifacts(&mut self, ps: &[PathBuf]) {
        for p in ps {
            self.artifact(p);
        }
    }

    pub fn artifact_list(&self) -> &[String] {
        &self.artifacts
    }
}

/// Runs `body` under the output-directory lock and writes the manifest,
/// marked failed when `body` fails.
pub fn execute(command: &str, cfg: &RunConfig, root: &Path, body: impl FnOnce(&mut Run) -> Result<()>) -> Result<RunManifest> {
    let _lock = RunLock::acquire(root)?;
    let started_at = now_secs();
    let mut run = Run::new(cfg, root);
    let result = body(&mut run);
    let manifest = RunManifest {
        command: command.to_string(),
        status: if result.is_ok() { RunStatus::Ok } else { RunStatus::Failed },
        error: result.as_ref().err().map(|e| format!("{e:#}")),
        config_hash: cfg.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        started_at,
        finished_at: now_secs(),
        inputs: run.inputs,
        artifacts: run.artifacts,
        summary: run.summary,
        config: cfg.to_value(),
    };
    write_json(&run.layout.manifest(command), &manifest)?;
    result.map(|_| manifest)
}

/// A slice read back from the container.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub id: u64,
    pub stem: String,
    pub image: Image,
    pub meta: Sidecar,
    pub labels: Option<LabelImage>,
}

impl Slice {
    pub fn domain(&self) -> Result<DomainLabel> {
        self.meta.domain.with_context(|| format!("{}: sidecar has no domain", self.stem))
    }

    fn item(&self, with_labels: bool) -> Result<TrainItem<f32>> {
        let norm = NormalizedSlice::try_from_image(self.image.clone())?;
        let labels = if with_labels { self.labels.as_ref() } else { None };
        Ok(TrainItem::new(&norm, self.domain()?, labels)?)
    }
}

fn read_slice(dir: &Path, stem: &str) -> Result<Slice> {
    let id = stem_id(stem).with_context(|| format!("{stem}: no numeric id"))?;
    let (image, meta) = container::read_image(dir, stem)?;
    let lab = labels_stem(id);
    let labels = if container::sidecar_path(dir, &lab).exists() {
        Some(container::read_labels(dir, &lab)?.0)
    } else {
        None
    };
    Ok(Slice {
        id,
        stem: stem.to_string(),
        image,
        meta,
        labels,
    })
}

/// Every image of a split directory, with labels where present. A missing
/// directory reads as empty.
pub fn read_split(dir: &Path) -> Result<Vec<Slice>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    container::list_stems(dir, ".img")?.iter().map(|s| read_slice(dir, s)).collect()
}

fn record_split_inputs(run: &mut Run, dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Ok(());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    files.sort();
    for f in files {
        if f.extension().is_some_and(|x| x == "raw" || x == "json") {
            run.input(&f)?;
        }
    }
    Ok(())
}

fn write_sample(dir: &Path, s: &LabeledSample, spacing: [f64; 2], with_labels: bool) -> Result<Vec<PathBuf>> {
    let mut out = container::write_image(dir, &image_stem(s.id), &s.image, &Sidecar::image(&s.image, spacing, Some(s.domain), Some(s.seed)))?;
    if with_labels {
        let l = LabelImage::from_masks(&s.brain_mask, &s.vessel_mask)?;
        out.extend(container::write_labels(dir, &labels_stem(s.id), &l, &Sidecar::labels(&l, spacing, Some(s.domain), Some(s.seed)))?);
    }
    Ok(out)
}

pub fn synth(run: &mut Run) -> Result<()> {
    let c = &run.cfg.synthgen;
    let split = make_split(&c.source, &c.target, c.counts, run.cfg.seed)?;
    let sp = [c.spacing_mm; 2];
    let labeled: [(&str, &[LabeledSample]); 5] = [
        ("source_labeled", &split.source_labeled),
        ("target_labeled", &split.target_labeled),
        ("val", &split.val),
        ("test_source", &split.test_source),
        ("test_target", &split.test_target),
    ];
    let mut total = 0;
    for (name, samples) in labeled {
        for s in samples {
            let files = write_sample(&run.layout.raw(name), s, sp, true)?;
            run.artifacts(&files);
            total += 1;
        }
    }
    let dir = run.layout.raw("target_unlabeled");
    for u in &split.target_unlabeled {
        let img = u.image();
        let files = container::write_image(&dir, &image_stem(u.id()), img, &Sidecar::image(img, sp, Some(u.domain()), None))?;
        run.artifacts(&files);
        total += 1;
    }
    run.summary.insert("synth_samples".into(), total as f64);
    Ok(())
}

pub fn preprocess(run: &mut Run) -> Result<()> {
    let cfg = run.cfg.preproc.clone();
    let target = [cfg.target_spacing_mm[1], cfg.target_spacing_mm[2]];
    let mut total = 0;
    for split in SPLITS {
        let src = run.layout.raw(split);
        record_split_inputs(run, &src)?;
        let out = run.layout.prep(split);
        for s in read_split(&src)? {
            ensure!(s.meta.spacing_mm.len() == 2, "{}: expected 2D spacing", s.stem);
            let masks = s.labels.as_ref().map(|l| (l.at_least(1), l.equal_to(2)));
            let p = preprocess_slice(&s.image, [s.meta.spacing_mm[0], s.meta.spacing_mm[1]], masks.as_ref().map(|(b, v)| (b, v)), &cfg)
                .with_context(|| format!("preprocessing {split}/{}", s.stem))?;
            let img = p.image.image();
            let files = container::write_image(&out, &s.stem, img, &Sidecar::image(img, target, s.meta.domain, s.meta.seed))?;
            run.artifacts(&files);
            if let Some(l) = &p.labels {
                let files = container::write_labels(&out, &labels_stem(s.id), l, &Sidecar::labels(l, target, s.meta.domain, s.meta.seed))?;
                run.artifacts(&files);
            }
            total += 1;
        }
    }
    ensure!(total > 0, "no raw data under {}", run.layout.root.join("data/raw").display());
    run.summary.insert("preprocessed_slices".into(), total as f64);
    Ok(())
}

fn pixels(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn tensor_image(t: &Tensor<f32>, i: usize) -> Result<Image> {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    Ok(Image::from_vec(h, w, t.data()[i * h * w..(i + 1) * h * w].iter().map(|&v| v as f64).collect())?)
}

type DomainPools = (Vec<TrainItem<f32>>, Vec<TrainItem<f32>>);

/// Source and target training items; labels are kept only for Phase 2.
fn load_training(run: &mut Run, phase2: bool) -> Result<DomainPools> {
    let mut source = Vec::new();
    let mut target = Vec::new();
    for split in ["source_labeled", "target_unlabeled", "target_labeled"] {
        let dir = run.layout.prep(split);
        record_split_inputs(run, &dir)?;
        for s in read_split(&dir)? {
            let item = s.item(phase2)?;
            match item.domain {
                DomainLabel::Source => source.push(item),
                DomainLabel::Target => target.push(item),
            }
        }
    }
    ensure!(!source.is_empty() || !target.is_empty(), "no preprocessed training data under {}", run.layout.root.display());
    Ok((source, target))
}

/// KS distance between generated and real pixel intensities.
pub fn generator_ks(nets: &Networks, store: &vesselda_core::nn::ParamStore<f32>, real: &[f64], seed: u64) -> Result<f64> {
    let fake = sample_generator(nets, store, 16, seed)?;
    Ok(ks_statistic(&pixels(&fake), real))
}

pub fn train_phase1(run: &mut Run) -> Result<()> {
    let cfg = run.cfg;
    let (source, target) = load_training(run, false)?;
    let real: Vec<f64> = source.iter().chain(&target).flat_map(|it| pixels(&it.image)).collect();
    let net_seed = derive_seed(cfg.seed, STREAM_NETS);
    let (nets, store) = Networks::new::<f32>(&cfg.arch(), net_seed)?;
    let mut p1 = cfg.phase1.clone();
    p1.seed = derive_seed(cfg.seed, STREAM_PHASE1 ^ cfg.phase1.seed);
    let sampler = MixedSampler::new(source, target, p1.augment)?;
    let ks_seed = derive_seed(cfg.seed, STREAM_KS);
    let mut trainer = Phase1Trainer::new(nets.clone(), store, p1.clone())?;
    let ks_start = generator_ks(&nets, &trainer.state.ema, &real, ks_seed)?;
    log::info!("phase1: {} iterations, KS at start {ks_start:.4}", p1.iterations);

    let ckpt_dir = run.layout.phase1_ckpt();
    let manifest = |iteration: u64| CheckpointManifest {
        phase: "phase1".into(),
        arch: nets.arch.clone(),
        arch_hash: String::new(),
        iteration,
        phase2_steps: 0,
        seed: net_seed,
        params_sha256: String::new(),
        config: cfg.to_value(),
    };
    let samples_dir = run.layout.phase1().join("samples");
    let save_samples = |store: &vesselda_core::nn::ParamStore<f32>, path: &Path| -> Result<()> {
        let samples = sample_generator(&nets, store, 8, ks_seed)?;
        let imgs = (0..8).map(|i| tensor_image(&samples, i)).collect::<Result<Vec<_>>>()?;
        figures::save_gray(path, &figures::strip(&imgs)?)
    };
    fs::create_dir_all(&samples_dir)?;
    let mut save_err = None;
    let mut grids = Vec::new();
    trainer.run(&sampler, &mut |ev| match ev {
        Phase1Event::Logged(s) => log::info!(
            "phase1 it {} loss_d {:.4} loss_g {:.4} r1 {:.4} D(real) {:.3} D(fake) {:.3}",
            s.iteration,
            s.loss_d,
            s.loss_g,
            s.r1,
            s.d_real,
            s.d_fake
        ),
        Phase1Event::Checkpoint(st) => {
            let grid = samples_dir.join(format!("it{:07}.png", st.iteration));
            let saved = checkpoint::save(&ckpt_dir, &nets, &st.ema, &manifest(st.iteration)).and_then(|_| save_samples(&st.ema, &grid));
            match saved {
                Ok(()) => grids.push(grid),
                Err(e) => {
                    save_err.get_or_insert(e);
                }
            }
        }
        Phase1Event::RolledBack { to_iteration, lr_scale } => log::warn!("phase1 rolled back to {to_iteration}, lr x{lr_scale}"),
    })?;
    if let Some(e) = save_err {
        return Err(e);
    }
    checkpoint::save(&ckpt_dir, &nets, &trainer.state.ema, &manifest(trainer.state.iteration))?;
    run.artifact(&ckpt_dir.join(checkpoint::PARAMS_FILE));
    run.artifact(&ckpt_dir.join(checkpoint::MANIFEST_FILE));

    let ks_end = generator_ks(&nets, &trainer.state.ema, &real, ks_seed)?;
    log::info!("phase1: KS at end {ks_end:.4}");
    let log_path = run.layout.phase1().join("log.json");
    write_json(&log_path, &serde_json::json!({ "history": trainer.history, "ks_start": ks_start, "ks_end": ks_end, "rollbacks": trainer.rollbacks }))?;
    run.artifact(&log_path);
    let png = run.layout.phase1().join("samples.png");
    save_samples(&trainer.state.ema, &png)?;
    run.artifacts(&grids);
    run.artifact(&png);

    let all_finite = trainer.history.iter().all(|s| s.all_finite());
    let last = trainer.history.last().copied();
    let s = &mut run.summary;
    s.insert("phase1_ks_start".into(), ks_start);
    s.insert("phase1_ks_end".into(), ks_end);
    s.insert("phase1_iterations".into(), trainer.state.iteration as f64);
    s.insert("phase1_rollbacks".into(), trainer.rollbacks as f64);
    s.insert("phase1_losses_finite".into(), if all_finite { 1.0 } else { 0.0 });
    if let Some(l) = last {
        s.insert("phase1_loss_d".into(), l.loss_d);
        s.insert("phase1_loss_g".into(), l.loss_g);
    }
    Ok(())
}

pub fn train_phase2(run: &mut Run, phase1_ckpt: &Path) -> Result<()> {
    let cfg = run.cfg;
    let arch = cfg.arch();
    let (nets, store, m1) = checkpoint::load(phase1_ckpt, Some(&arch)).with_context(|| format!("loading {}", phase1_ckpt.display()))?;
    ensure!(m1.phase == "phase1", "{} is a {} checkpoint, expected phase1", phase1_ckpt.display(), m1.phase);
    run.input(&phase1_ckpt.join(checkpoint::PARAMS_FILE))?;
    let (source, target) = load_training(run, true)?;
    let val_dir = run.layout.prep("val");
    record_split_inputs(run, &val_dir)?;
    let val = read_split(&val_dir)?.iter().map(|s| s.item(true)).collect::<Result<Vec<_>>>()?;
    let mut p2 = cfg.phase2.clone();
    p2.seed = derive_seed(cfg.seed, STREAM_PHASE2 ^ cfg.phase2.seed);
    let sampler = MixedSampler::new(source, target, p2.augment)?;
    let mut trainer = Phase2Trainer::new(nets.clone(), store, p2)?;
    trainer.run(&sampler, &val, &mut |ev| match ev {
        Phase2Event::Logged(s) => log::info!(
            "phase2 {}it {} [{}] loss_r {:.4} loss_s {} labeled {}",
            if s.warmup { "warm-up " } else { "" },
            s.iteration,
            s.configuration.as_str(),
            s.loss_r,
            s.loss_s.map_or("-".to_string(), |v| format!("{v:.4}")),
            s.labeled
        ),
        Phase2Event::Validated(v) => log::info!(
            "phase2 validation it {} dice {:.4} recon mse {:.5} cycle {:.5}",
            v.iteration,
            v.dice,
            v.recon_mse,
            v.cycle_loss
        ),
        Phase2Event::RolledBack { to_iteration, lr_scale } => log::warn!("phase2 rolled back to {to_iteration}, lr x{lr_scale}"),
    })?;
    let best_it = trainer.best.as_ref().map_or(trainer.state.iteration, |(v, _)| v.iteration);
    let ckpt_dir = run.layout.phase2_ckpt();
    let m = CheckpointManifest {
        phase: "phase2".into(),
        arch: nets.arch.clone(),
        arch_hash: String::new(),
        iteration: best_it,
        phase2_steps: best_it.max(1),
        seed: m1.seed,
        params_sha256: String::new(),
        config: cfg.to_value(),
    };
    checkpoint::save(&ckpt_dir, &nets, trainer.final_store(), &m)?;
    run.artifact(&ckpt_dir.join(checkpoint::PARAMS_FILE));
    run.artifact(&ckpt_dir.join(checkpoint::MANIFEST_FILE));
    let log_path = run.layout.phase2().join("log.json");
    write_json(&log_path, &serde_json::json!({ "history": trainer.history, "validations": trainer.validations, "rollbacks": trainer.rollbacks }))?;
    run.artifact(&log_path);

    let s = &mut run.summary;
    s.insert("phase2_iterations".into(), trainer.state.iteration as f64);
    s.insert("phase2_best_iteration".into(), best_it as f64);
    if let (Some(first), Some(last)) = (trainer.validations.first(), trainer.validations.last()) {
        s.insert("phase2_val_dice_start".into(), first.dice);
        s.insert("phase2_val_recon_mse_start".into(), first.recon_mse);
        s.insert("phase2_val_recon_mse_end".into(), last.recon_mse);
        s.insert("phase2_val_cycle_loss_start".into(), first.cycle_loss);
        s.insert("phase2_val_cycle_loss_end".into(), last.cycle_loss);
    }
    if let Some((v, _)) = &trainer.best {
        s.insert("phase2_val_dice_best".into(), v.dice);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    pub stem: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Vessel Dice against labels stored next to the input, when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vessel_dice: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub slices: Vec<SliceReport>,
    pub mean_vessel_dice: Option<f64>,
}

impl BatchReport {
    fn finish(mut self) -> Self {
        let d: Vec<f64> = self.slices.iter().filter_map(|s| s.vessel_dice).collect();
        self.mean_vessel_dice = (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64);
        self
    }
}

fn vessel_dice(stem: &str, pred: &LabelImage, gt: &LabelImage) -> Result<f64> {
    Ok(evaluate_volume(stem, std::slice::from_ref(pred), std::slice::from_ref(gt))?.vessels.dice)
}

fn input_stems(dir: &Path) -> Result<Vec<String>> {
    if !dir.exists() {
        bail!("input directory {} does not exist", dir.display());
    }
    container::list_stems(dir, ".img")
}

fn write_prediction(run: &mut Run, out_dir: &Path, s: &Slice, pred: &LabelImage, overlay: bool) -> Result<Option<f64>> {
    let stem = format!("{:05}.mask", s.id);
    let sp = [s.meta.spacing_mm.first().copied().unwrap_or(1.0), s.meta.spacing_mm.get(1).copied().unwrap_or(1.0)];
    let files = container::write_labels(out_dir, &stem, pred, &Sidecar::labels(pred, sp, s.meta.domain, s.meta.seed))?;
    run.artifacts(&files);
    if overlay {
        let png = out_dir.join(format!("{:05}.overlay.png", s.id));
        figures::save_rgb(&png, &figures::overlay(&s.image, pred)?)?;
        run.artifact(&png);
    }
    s.labels.as_ref().map(|gt| vessel_dice(&s.stem, pred, gt)).transpose()
}

/// Segments every image in `in_dir` with a Phase 2 checkpoint. Unreadable
/// or malformed inputs are reported per file without stopping the batch.
pub fn infer_batch(run: &mut Run, ckpt: &Path, in_dir: &Path, out_dir: &Path) -> Result<BatchReport> {
    let (nets, store, m) = checkpoint::load(ckpt, None).with_context(|| format!("loading {}", ckpt.display()))?;
    let seg = Segmenter::new(&nets, &store, m.phase2_steps)?;
    run.input(&ckpt.join(checkpoint::PARAMS_FILE))?;
    let mut report = BatchReport::default();
    let mut ready: Vec<Slice> = Vec::new();
    for stem in input_stems(in_dir)? {
        match read_slice(in_dir, &stem).and_then(|s| {
            s.domain()?;
            ensure!(s.image.height == nets.arch.image_size && s.image.width == nets.arch.image_size, "image is {}x{}, model expects {}", s.image.height, s.image.width, nets.arch.image_size);
            Ok(s)
        }) {
            Ok(s) => {
                run.input(&container::raw_path(in_dir, &stem))?;
                ready.push(s)
            }
            Err(e) => report.slices.push(SliceReport {
                stem,
                ok: false,
                error: Some(format!("{e:#}")),
                vessel_dice: None,
            }),
        }
    }
    fs::create_dir_all(out_dir)?;
    for chunk in ready.chunks(run.cfg.infer.batch_size) {
        for domain in [DomainLabel::Target, DomainLabel::Source] {
            let group: Vec<&Slice> = chunk.iter().filter(|s| s.meta.domain == Some(domain)).collect();
            if group.is_empty() {
                continue;
            }
            let imgs = group
                .iter()
                .map(|s| Tensor::from_vec(&[1, s.image.height, s.image.width], s.image.data.iter().map(|&v| v as f32).collect()))
                .collect::<vesselda_core::Result<Vec<_>>>()?;
            let results = seg.infer_domain(&Tensor::stack(&imgs)?, domain)?;
            for (s, r) in group.iter().zip(results) {
                let d = write_prediction(run, out_dir, s, &r.mask, run.cfg.infer.overlays)?;
                report.slices.push(SliceReport {
                    stem: s.stem.clone(),
                    ok: true,
                    error: None,
                    vessel_dice: d,
                });
            }
        }
    }
    report.slices.sort_by(|a, b| a.stem.cmp(&b.stem));
    let report = report.finish();
    let path = out_dir.join("report.json");
    write_json(&path, &report)?;
    run.artifact(&path);
    Ok(report)
}

/// Sato baseline on every image in `in_dir`. Polarity follows each slice's
/// domain unless `polarity` forces one.
pub fn baseline_sato(run: &mut Run, in_dir: &Path, out_dir: &Path, polarity: Option<Polarity>) -> Result<BatchReport> {
    let mut report = BatchReport::default();
    fs::create_dir_all(out_dir)?;
    for stem in input_stems(in_dir)? {
        let res = read_slice(in_dir, &stem).and_then(|s| {
            let mut sc = run.cfg.sato.for_domain(s.domain()?);
            if let Some(p) = polarity {
                sc.polarity = p;
            }
            let brain = s.labels.as_ref().map(|l| l.at_least(1));
            let region = if run.cfg.sato.threshold_in_brain { brain.as_ref() } else { None };
            let vessels = segment_sato(&s.image, &sc, region)?;
            let vessels = match &brain {
                Some(b) => vessels.and(b),
                None => vessels,
            };
            let brain_pred = brain.as_ref().map_or(vessels.clone(), |b| b.or(&vessels));
            let pred = LabelImage::from_masks(&brain_pred, &vessels)?;
            run.input(&container::raw_path(in_dir, &stem))?;
            write_prediction(run, out_dir, &s, &pred, false)
        });
        report.slices.push(match res {
            Ok(d) => SliceReport {
                stem,
                ok: true,
                error: None,
                vessel_dice: d,
            },
            Err(e) => SliceReport {
                stem,
                ok: false,
                error: Some(format!("{e:#}")),
                vessel_dice: None,
            },
        });
    }
    let report = report.finish();
    let path = out_dir.join("report.json");
    write_json(&path, &report)?;
    run.artifact(&path);
    Ok(report)
}

/// Scores `<id>.mask` label maps in `pred_dir` against `<id>.lab` maps in
/// `gt_dir`, one volume per slice, and writes `out` plus a text table.
pub fn evaluate(run: &mut Run, pred_dir: &Path, gt_dir: &Path, out: &Path) -> Result<MetricsReport> {
    let mut vols = Vec::new();
    for stem in container::list_stems(pred_dir, ".mask")? {
        let id = stem_id(&stem).with_context(|| format!("{stem}: no numeric id"))?;
        let (pred, _) = container::read_labels(pred_dir, &stem)?;
        let gstem = labels_stem(id);
        let (gt, _) = container::read_labels(gt_dir, &gstem).with_context(|| format!("ground truth for {stem}"))?;
        run.input(&container::raw_path(pred_dir, &stem))?;
        run.input(&container::raw_path(gt_dir, &gstem))?;
        vols.push(evaluate_volume(&format!("{id:05}"), &[pred], &[gt])?);
    }
    let report = aggregate(&vols).with_context(|| format!("no predictions in {}", pred_dir.display()))?;
    write_json(out, &report)?;
    let table = out.with_extension("txt");
    fs::write(&table, report.to_table())?;
    run.artifact(out);
    run.artifact(&table);
    Ok(report)
}

fn summarize(run: &mut Run, prefix: &str, r: &MetricsReport) {
    let s = &mut run.summary;
    s.insert(format!("{prefix}vessel_dice"), r.vessels.dice.mean);
    s.insert(format!("{prefix}vessel_dice_std"), r.vessels.dice.std);
    s.insert(format!("{prefix}vessel_precision"), r.vessels.precision.mean);
    s.insert(format!("{prefix}vessel_recall"), r.vessels.recall.mean);
    s.insert(format!("{prefix}vessel_cldice"), r.vessels.cldice.mean);
    s.insert(format!("{prefix}brain_dice"), r.brain.dice.mean);
}

/// Projections of each test split and overlays at its first, middle and
/// last slice.
pub fn figures(run: &mut Run) -> Result<()> {
    let dir = run.layout.figures();
    fs::create_dir_all(&dir)?;
    for split in TEST_SPLITS {
        let slices = read_split(&run.layout.prep(split))?;
        if slices.is_empty() {
            log::warn!("figures: no preprocessed {split} slices");
            continue;
        }
        let imgs: Vec<Image> = slices.iter().map(|s| s.image.clone()).collect();
        for (name, img) in [("mip", figures::mip(&imgs)?), ("minip", figures::min_ip(&imgs)?)] {
            let p = dir.join(format!("{split}_{name}.png"));
            figures::save_gray(&p, &figures::gray(&img))?;
            run.artifact(&p);
        }
        let n = slices.len();
        let mut picks = vec![("top", 0), ("middle", n / 2), ("bottom", n - 1)];
        picks.dedup_by_key(|p| p.1);
        for (level, i) in picks {
            let s = &slices[i];
            let pred_dir = run.layout.infer(split);
            let stem = format!("{:05}.mask", s.id);
            if !container::sidecar_path(&pred_dir, &stem).exists() {
                log::warn!("figures: no prediction for {split}/{}, overlay skipped", s.stem);
                continue;
            }
            let (pred, _) = container::read_labels(&pred_dir, &stem)?;
            let p = dir.join(format!("{split}_{level}_pred.png"));
            figures::save_rgb(&p, &figures::overlay(&s.image, &pred)?)?;
            run.artifact(&p);
            if let Some(gt) = &s.labels {
                let p = dir.join(format!("{split}_{level}_gt.png"));
                figures::save_rgb(&p, &figures::overlay(&s.image, gt)?)?;
                run.artifact(&p);
            }
        }
    }
    Ok(())
}

/// synth, preprocess, both training phases, inference and the Sato
/// baseline on both test splits, evaluation, figures.
pub fn pipeline(run: &mut Run) -> Result<()> {
    synth(run)?;
    preprocess(run)?;
    train_phase1(run)?;
    let ckpt1 = run.layout.phase1_ckpt();
    train_phase2(run, &ckpt1)?;
    let ckpt2 = run.layout.phase2_ckpt();
    for split in TEST_SPLITS {
        let short = split.trim_start_matches("test_");
        let prep = run.layout.prep(split);
        let (inf, sat) = (run.layout.infer(split), run.layout.sato(split));
        infer_batch(run, &ckpt2, &prep, &inf)?;
        baseline_sato(run, &prep, &sat, None)?;
        let model = evaluate(run, &inf, &prep, &run.layout.eval(&format!("model_{short}")).join("report.json"))?;
        summarize(run, &format!("{short}_"), &model);
        let base = evaluate(run, &sat, &prep, &run.layout.eval(&format!("sato_{short}")).join("report.json"))?;
        summarize(run, &format!("sato_{short}_"), &base);
    }
    figures(run)
}
