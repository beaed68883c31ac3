//! Acceptance checks, one line per criterion.
//!
//! `cargo test -p vesselda --test acceptance [-- 3 5]` runs all criteria or
//! the listed ones. The full desk experiment (criterion 7) takes hours on a
//! CPU: it is evaluated from finished `pipeline` runs under
//! `target/acceptance/desk-experiment/seed-<n>` and only trains missing seeds
//! when `VESSELDA_FULL_ACCEPTANCE=1` is set.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use vesselda::commands::{self, read_split};
use vesselda::config::{self, RunConfig};
use vesselda::manifest::{RunManifest, RunStatus};
use vesselda_core::autograd::Graph;
use vesselda_core::data::Batch;
use vesselda_core::domain::DomainLabel;
use vesselda_core::image::{BinaryMask, Grid, Image, LabelImage};
use vesselda_core::infer::{average_argmax, Segmenter};
use vesselda_core::losses::{loss_r, loss_s, LossWeights, PerceptualNet};
use vesselda_core::metrics::{aggregate, cldice, count_components, dice, precision_recall, skeletonize, MeanStd, MetricValues, VolumeMetrics};
use vesselda_core::nets::{ArchConfig, Networks};
use vesselda_core::nn::{GroupSet, ParamGroup, ParamStore};
use vesselda_core::phase1::{Phase1Config, Phase1Trainer};
use vesselda_core::phase2::{Configuration, Phase2Config, Phase2Trainer};
use vesselda_core::preproc::{preprocess_slice, PreprocConfig};
use vesselda_core::rng::{normal_tensor, seeded};
use vesselda_core::sato::{geometric_scales, response_at_scale, SatoConfig};
use vesselda_core::synthgen::{generate_sample, PhantomSpec, Polarity};
use vesselda_core::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Pass,
    Fail,
    NotRun,
}

struct Verdict {
    outcome: Outcome,
    detail: String,
}

impl Verdict {
    fn check(ok: bool, detail: String) -> Self {
        Self {
            outcome: if ok { Outcome::Pass } else { Outcome::Fail },
            detail,
        }
    }
}

type Criterion = (u32, &'static str, fn() -> Verdict);

const CRITERIA: [Criterion; 10] = [
    (1, "metric oracle equivalence", metric_oracles),
    (2, "skeletonization properties", skeleton_properties),
    (3, "loss gradient checks", loss_gradients),
    (4, "gradient routing", gradient_routing),
    (5, "sato ridge calibration", sato_ridges),
    (6, "phase 1 smoke", phase1_smoke),
    (7, "end-to-end desk experiment", desk_experiment),
    (8, "inference rule conformance", inference_rule),
    (9, "determinism", determinism),
    (10, "report formatting", report_formatting),
];

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let v = std::panic::catch_unwind(f).unwrap_or_else(|e| Verdict {
            outcome: Outcome::Fail,
            detail: format!(
                "panicked: {}",
                e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
            ),
        });
        let tag = match v.outcome {
            Outcome::Pass => "PASS",
            Outcome::Fail => {
                failed += 1;
                "FAIL"
            }
            Outcome::NotRun => "NOT RUN",
        };
        let line = format!("criterion {n:>2} {name:<30} {tag:<8} [{:.1}s] {}\n", t.elapsed().as_secs_f64(), v.detail);
        let mut out = std::io::stdout().lock();
        out.write_all(line.as_bytes()).unwrap();
        out.flush().unwrap();
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn random_mask(rng: &mut vesselda_core::rng::Rng, h: usize, w: usize, p: f64) -> BinaryMask {
    Grid::from_fn(h, w, |_, _| rng.random_bool(p))
}

fn metric_oracles() -> Verdict {
    let t = Instant::now();
    let mut rng = seeded(101);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let p = [0.05, 0.3, 0.6][i % 3];
        let a = random_mask(&mut rng, 16, 16, p);
        let b = random_mask(&mut rng, 16, 16, p);
        let set = |m: &BinaryMask| -> HashSet<usize> { (0..m.len()).filter(|&k| m.data[k]).collect() };
        let (sa, sb) = (set(&a), set(&b));
        let inter = sa.intersection(&sb).count() as f64;
        let ratio = |num: f64, den: usize, other: usize| match (den, other) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            _ => num / den as f64,
        };
        let d_oracle = if sa.is_empty() && sb.is_empty() { 1.0 } else { 2.0 * inter / (sa.len() + sb.len()) as f64 };
        let prec_oracle = ratio(inter, sa.len(), sb.len());
        let rec_oracle = ratio(inter, sb.len(), sa.len());
        let (ka, kb) = (set(&skeletonize(&a)), set(&skeletonize(&b)));
        let cl_oracle = if sa.is_empty() && sb.is_empty() {
            1.0
        } else if sa.is_empty() || sb.is_empty() {
            0.0
        } else {
            let tprec = ka.intersection(&sb).count() as f64 / ka.len() as f64;
            let tsens = kb.intersection(&sa).count() as f64 / kb.len() as f64;
            if tprec + tsens == 0.0 {
                0.0
            } else {
                2.0 * tprec * tsens / (tprec + tsens)
            }
        };
        let pr = precision_recall(&a, &b).unwrap();
        for (got, want) in [
            (dice(&a, &b).unwrap(), d_oracle),
            (pr.precision, prec_oracle),
            (pr.recall, rec_oracle),
            (cldice(&a, &b).unwrap(), cl_oracle),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Verdict::check(worst <= 1e-12 && secs < 10.0, format!("100 pairs, max |diff| {worst:.1e}, {secs:.2}s"))
}

fn tube_mask(rng: &mut vesselda_core::rng::Rng, size: usize) -> BinaryMask {
    let mut m = BinaryMask::new(size, size);
    let s = size as f64;
    for _ in 0..rng.random_range(1..4) {
        let (mut y, mut x) = (rng.random_range(0.2 * s..0.8 * s), rng.random_range(0.2 * s..0.8 * s));
        let mut th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let r: f64 = rng.random_range(0.8..2.8);
        for _ in 0..rng.random_range(15..60) {
            th += rng.random_range(-0.35..0.35);
            y = (y + th.sin()).clamp(2.0, s - 3.0);
            x = (x + th.cos()).clamp(2.0, s - 3.0);
            for py in 0..size {
                for px in 0..size {
                    if (py as f64 - y).powi(2) + (px as f64 - x).powi(2) <= r * r {
                        m.set(py, px, true);
                    }
                }
            }
        }
    }
    m
}

/// 8-connected components by breadth-first search.
fn components8(m: &BinaryMask) -> usize {
    let mut seen = vec![false; m.len()];
    let mut n = 0;
    for start in 0..m.len() {
        if !m.data[start] || seen[start] {
            continue;
        }
        n += 1;
        seen[start] = true;
        let mut q = VecDeque::from([start]);
        while let Some(k) = q.pop_front() {
            let (y, x) = ((k / m.width) as i64, (k % m.width) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= m.height as i64 || nx >= m.width as i64 {
                        continue;
                    }
                    let j = ny as usize * m.width + nx as usize;
                    if m.data[j] && !seen[j] {
                        seen[j] = true;
                        q.push_back(j);
                    }
                }
            }
        }
    }
    n
}

fn skeleton_properties() -> Verdict {
    let t = Instant::now();
    let mut rng = seeded(202);
    let (mut subset, mut conn, mut idem) = (0, 0, 0);
    for _ in 0..50 {
        let m = tube_mask(&mut rng, 48);
        let k = skeletonize(&m);
        subset += k.is_subset_of(&m) as usize;
        let c = components8(&m);
        conn += (components8(&k) == c && count_components(&k) == c) as usize;
        idem += (skeletonize(&k) == k) as usize;
    }
    let secs = t.elapsed().as_secs_f64();
    Verdict::check(
        subset == 50 && conn == 50 && idem == 50 && secs < 30.0,
        format!("50 tubes: subset {subset}/50, components kept {conn}/50, idempotent {idem}/50, {secs:.2}s"),
    )
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn central_fd(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn loss_gradients() -> Verdict {
    let mut rng = seeded(303);
    let w = LossWeights::default();
    let mut store = ParamStore::<f64>::new();
    let perceptual = PerceptualNet::new(&mut store, &mut seeded(7), &[4, 8, 8, 8]);
    let (mut worst_r, mut worst_s) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let x: Tensor<f64> = normal_tensor(&mut rng, &[2, 1, 8, 8]);
        let xh: Tensor<f64> = normal_tensor(&mut rng, &[2, 1, 8, 8]);
        let eval_r = |v: &Tensor<f64>| {
            let mut g = Graph::with_params(&store, GroupSet::NONE);
            let (a, b) = (g.constant(x.clone()), g.constant(v.clone()));
            let l = loss_r(&mut g, &perceptual, a, b, &w).unwrap();
            g.value(l).item()
        };
        let mut g = Graph::with_params(&store, GroupSet::NONE);
        let a = g.constant(x.clone());
        let b = g.input(xh.clone());
        let l = loss_r(&mut g, &perceptual, a, b, &w).unwrap();
        let grad = g.backward(l).wrt(b).unwrap().data().to_vec();
        worst_r = worst_r.max(rel_err(&grad, &central_fd(&xh, eval_r)));

        let logits: Tensor<f64> = normal_tensor(&mut rng, &[2, 3, 4, 4]);
        let y = Tensor::from_fn(&[2, 3, 4, 4], {
            let cls: Vec<usize> = (0..32).map(|_| rng.random_range(0..3)).collect();
            move |i| {
                let (n, c, p) = (i / 48, (i / 16) % 3, i % 16);
                if cls[n * 16 + p] == c {
                    1.0
                } else {
                    0.0
                }
            }
        });
        let eval_s = |v: &Tensor<f64>| {
            let mut g = Graph::new();
            let l = g.constant(v.clone());
            let o = loss_s(&mut g, l, &y, &w).unwrap();
            g.value(o).item()
        };
        let mut g = Graph::new();
        let l = g.input(logits.clone());
        let o = loss_s(&mut g, l, &y, &w).unwrap();
        let grad = g.backward(o).wrt(l).unwrap().data().to_vec();
        worst_s = worst_s.max(rel_err(&grad, &central_fd(&logits, eval_s)));
    }
    Verdict::check(
        worst_r < 1e-4 && worst_s < 1e-4,
        format!("20 instances in f64: max relative error loss_R (8x8) {worst_r:.1e}, loss_S (4x4) {worst_s:.1e}"),
    )
}

fn tiny_arch(size: usize) -> ArchConfig {
    let mut a = ArchConfig::desk(size);
    a.z_dim = 8;
    a.w_dim = 8;
    a.mapping_layers = 2;
    a.channels = vec![4; a.levels()];
    a.label_hidden = (6, 4);
    a.perceptual_channels = vec![2, 2, 2, 2];
    a
}

fn changed_groups(a: &ParamStore<f32>, b: &ParamStore<f32>) -> Vec<ParamGroup> {
    let mut out: Vec<ParamGroup> = a.iter().filter(|(id, p)| p.value != *b.get(*id)).map(|(_, p)| p.group).collect();
    out.sort_by_key(|g| g.as_str());
    out.dedup();
    out
}

fn gradient_routing() -> Verdict {
    use ParamGroup::*;
    let generator = [Mapping, Synthesis, LabelBranch];
    let mut problems = Vec::new();
    let arch = tiny_arch(16);
    let mut rng = seeded(404);
    let images: Tensor<f32> = normal_tensor(&mut rng, &[2, 1, 16, 16]);
    let labels = Tensor::from_fn(&[2, 3, 16, 16], |i| if (i / 256) % 3 == (i % 16) % 3 { 1.0 } else { 0.0 });
    let batch = |labeled: bool| Batch {
        images: images.clone(),
        domains: vec![DomainLabel::Source, DomainLabel::Target],
        labeled_rows: if labeled { vec![0, 1] } else { vec![] },
        labels: labeled.then(|| labels.clone()),
    };
    let mut steps = 0;
    for c in Configuration::ALL {
        for labeled in [false, true] {
            let (nets, store) = Networks::new::<f32>(&arch, 9).unwrap();
            let mut t = Phase2Trainer::new(nets, store, Phase2Config::default()).unwrap();
            let before = t.state.store.clone();
            t.step(&batch(labeled), c).unwrap();
            let ch = changed_groups(&before, &t.state.store);
            steps += 1;
            if ch.contains(&Discriminator) || ch.contains(&Fixed) {
                problems.push(format!("phase 2 {} step changed {ch:?}", c.as_str()));
            }
            if !labeled && ch.iter().any(|g| generator.contains(g)) {
                problems.push(format!("unlabeled {} step changed {ch:?}", c.as_str()));
            }
            if !ch.contains(&Encoder) {
                problems.push(format!("{} step left the encoder unchanged", c.as_str()));
            }
        }
    }
    let (nets, store) = Networks::new::<f32>(&arch, 9).unwrap();
    let mut t = Phase2Trainer::new(nets, store, Phase2Config::default()).unwrap();
    let before = t.state.store.clone();
    t.warmup_step(&batch(true)).unwrap();
    steps += 1;
    if changed_groups(&before, &t.state.store).contains(&Discriminator) {
        problems.push("warm-up step changed the discriminator".into());
    }

    let (nets, store) = Networks::new::<f32>(&arch, 9).unwrap();
    let mut t = Phase1Trainer::new(nets, store, Phase1Config { batch_size: 2, ..Default::default() }).unwrap();
    for _ in 0..2 {
        let before = t.state.store.clone();
        let (_, _, _, r1) = t.d_step(&images).unwrap();
        let ch = changed_groups(&before, &t.state.store);
        if ch != [Discriminator] {
            problems.push(format!("phase 1 D-step (r1 {}) changed {ch:?}", r1.is_some()));
        }
        let before = t.state.store.clone();
        t.g_step(2).unwrap();
        let ch = changed_groups(&before, &t.state.store);
        if ch.contains(&Discriminator) || ch.contains(&Encoder) {
            problems.push(format!("phase 1 G-step changed {ch:?}"));
        }
        t.state.iteration += 1;
        steps += 2;
    }
    let ok = problems.is_empty();
    Verdict::check(ok, if ok { format!("{steps} steps, all bit-exact where required") } else { problems.join("; ") })
}

/// Vertical ridge centered at column `cx`: a flat-top tube of radius `r`
/// with anti-aliased edges, or a Gaussian profile of std `r`.
fn ridge(size: usize, cx: f64, r: f64, gaussian: bool) -> Image {
    Image::from_fn(size, size, |_, x| {
        if gaussian {
            (-(x as f64 - cx).powi(2) / (2.0 * r * r)).exp()
        } else {
            let k = 32;
            (0..k).filter(|i| ((x as f64 - 0.5 + (*i as f64 + 0.5) / k as f64) - cx).abs() <= r).count() as f64 / k as f64
        }
    })
}

fn best_scale(img: &Image, cx: usize, cfg: &SatoConfig, scales: &[f64]) -> f64 {
    let rows = img.height / 4..3 * img.height / 4;
    let mut best = (0.0, f64::MIN);
    for &s in scales {
        let r = response_at_scale(img, s, cfg);
        let v = rows.clone().map(|y| r.at(y, cx)).sum::<f64>();
        if v > best.1 {
            best = (s, v);
        }
    }
    best.0
}

fn sato_ridges() -> Verdict {
    let t = Instant::now();
    let size = 64;
    let cx = 31.3;
    let dense = geometric_scales(0.5, 8.0, 61);
    let bright = SatoConfig {
        scales_px: geometric_scales(1.0, 5.0, 8),
        polarity: Polarity::Bright,
        ..Default::default()
    };
    let dark = SatoConfig { polarity: Polarity::Dark, ..bright.clone() };
    let mut ok = true;
    let mut parts = Vec::new();
    for r in [1.5, 2.5, 3.5] {
        let img = ridge(size, cx, r, false);
        let resp = vesselness_of(&img, &bright);
        let off = (size / 8..size - size / 8)
            .map(|y| {
                let row: Vec<f64> = (0..size).map(|x| resp.at(y, x)).collect();
                let am = (0..size).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
                (am as f64 - cx).abs()
            })
            .fold(0.0, f64::max);
        let s = best_scale(&img, 31, &bright, &dense);
        let rd = vesselness_of(&img, &dark);
        let contrast = (size / 8..size - size / 8).map(|y| rd.at(y, 31)).sum::<f64>() / (size / 8..size - size / 8).map(|y| resp.at(y, 31)).sum::<f64>();
        let g = best_scale(&ridge(size, cx, r, true), 31, &bright, &dense) / r;
        ok &= off <= 1.0 && (s / r - 1.0).abs() <= 0.25 && contrast < 0.05;
        parts.push(format!("r={r}: centerline off {off:.1}px, best scale {:.2}r, dark/bright {:.1}% (gaussian profile {g:.2}r)", s / r, contrast * 100.0));
    }
    let secs = t.elapsed().as_secs_f64();
    Verdict::check(ok && secs < 60.0, parts.join("; "))
}

fn vesselness_of(img: &Image, cfg: &SatoConfig) -> Image {
    vesselda_core::sato::vesselness(img, cfg).unwrap()
}

fn small_counts() -> &'static str {
    "synthgen.counts={\"source_labeled\":3,\"target_unlabeled\":2,\"target_labeled\":1,\"val\":1,\"test_source\":2,\"test_target\":2}"
}

fn phase1_smoke() -> Verdict {
    let mut tries = Vec::new();
    for seed in 0..3u64 {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config::load(None, &["image_size=32".into(), "phase1.iterations=2000".into(), format!("seed={seed}")]).unwrap();
        let t = Instant::now();
        let m = commands::execute("smoke", &cfg, dir.path(), |run| {
            commands::synth(run)?;
            commands::preprocess(run)?;
            commands::train_phase1(run)
        });
        let m = match m {
            Ok(m) => m,
            Err(e) => {
                tries.push(format!("seed {seed}: error {e:#}"));
                continue;
            }
        };
        let (ks0, ks1) = (m.summary["phase1_ks_start"], m.summary["phase1_ks_end"]);
        let finite = m.summary["phase1_losses_finite"] == 1.0;
        tries.push(format!("seed {seed}: KS {ks0:.4} -> {ks1:.4}, losses finite {finite}, {:.0}s", t.elapsed().as_secs_f64()));
        if finite && ks1 < ks0 {
            return Verdict::check(true, format!("32x32 CPU fallback, 2000 it, batch 4; {}", tries.join("; ")));
        }
    }
    Verdict::check(false, format!("32x32 CPU fallback, 2000 it, batch 4; {}", tries.join("; ")))
}

fn desk_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance/desk-experiment")
}

fn desk_config(seed: u64) -> RunConfig {
    config::load(None, &[format!("seed={seed}")]).unwrap()
}

fn finished_pipeline(root: &Path, cfg: &RunConfig) -> Option<RunManifest> {
    let text = fs::read_to_string(root.join("manifests/pipeline.json")).ok()?;
    let m: RunManifest = serde_json::from_str(&text).ok()?;
    (m.status == RunStatus::Ok && m.config_hash == cfg.hash()).then_some(m)
}

fn desk_experiment() -> Verdict {
    let full = std::env::var("VESSELDA_FULL_ACCEPTANCE").is_ok_and(|v| v == "1");
    let mut runs = Vec::new();
    let mut passed = false;
    for seed in 0..3u64 {
        let cfg = desk_config(seed);
        let root = desk_root().join(format!("seed-{seed}"));
        let m = match finished_pipeline(&root, &cfg) {
            Some(m) => Some(m),
            None if full => {
                let _ = fs::remove_dir_all(&root);
                commands::execute("pipeline", &cfg, &root, commands::pipeline).ok()
            }
            None => None,
        };
        let Some(m) = m else { continue };
        let s = &m.summary;
        let (t, sato, src) = (s["target_vessel_dice"], s["sato_target_vessel_dice"], s["source_vessel_dice"]);
        let ok = t >= 0.60 && t > sato && src >= 0.70;
        runs.push(format!("seed {seed}: target {t:.3} vs sato {sato:.3}, source {src:.3}"));
        if ok {
            passed = true;
            break;
        }
    }
    if runs.is_empty() {
        return Verdict {
            outcome: Outcome::NotRun,
            detail: format!(
                "gated: no finished 64x64 pipeline runs under {}; set VESSELDA_FULL_ACCEPTANCE=1 to train (hours on CPU)",
                desk_root().display()
            ),
        };
    }
    Verdict::check(passed, format!("64x64, 20k+5k it, best of {} seed(s): {}", runs.len(), runs.join("; ")))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn inference_rule() -> Verdict {
    let size = 16;
    let arch = tiny_arch(size);
    let (nets, store) = Networks::new::<f64>(&arch, 11).unwrap();
    let pre = PreprocConfig {
        target_spacing_mm: [2.0; 3],
        size,
        ..Default::default()
    };
    let mut images = Vec::new();
    for i in 0..20u64 {
        let s = generate_sample(&PhantomSpec::target(1000 + i)).unwrap();
        let p = preprocess_slice(&s.image, [0.5, 0.5], None, &pre).unwrap();
        let img = p.image.image();
        images.push(Tensor::from_vec(&[1, size, size], img.data.clone()).unwrap());
    }
    let seg = Segmenter::new(&nets, &store, 1).unwrap();
    let results = seg.infer(&Tensor::stack(&images).unwrap()).unwrap();
    let hw = size * size;
    let (mut exact, mut prob_err) = (0, 0.0f64);
    for (img, r) in images.iter().zip(&results) {
        // Each pass run on its own, softmax and argmax composed here.
        let x = img.clone().reshape(&[1, 1, size, size]).unwrap();
        let logits = |domain: DomainLabel| {
            let mut g = Graph::with_params(&store, GroupSet::NONE);
            let v = g.constant(x.clone());
            let out = nets.pass(&mut g, v, &[domain]).unwrap();
            g.value(out.logits).data().to_vec()
        };
        let (lt, ls) = (logits(DomainLabel::Target), logits(DomainLabel::Source));
        let mut mask = Vec::with_capacity(hw);
        for p in 0..hw {
            let pt = softmax(&[lt[p], lt[hw + p], lt[2 * hw + p]]);
            let ps = softmax(&[ls[p], ls[hw + p], ls[2 * hw + p]]);
            for c in 0..3 {
                prob_err = prob_err.max((pt[c] - r.prob_recon.data()[c * hw + p]).abs());
                prob_err = prob_err.max((ps[c] - r.prob_translation.data()[c * hw + p]).abs());
            }
            let (a, b) = (r.prob_recon.data(), r.prob_translation.data());
            let avg: Vec<f64> = (0..3).map(|c| (a[c * hw + p] + b[c * hw + p]) / 2.0).collect();
            let mut best = 0;
            for c in 1..3 {
                if avg[c] > avg[best] {
                    best = c;
                }
            }
            mask.push(best as u8);
        }
        exact += (r.mask == LabelImage::from_vec(size, size, mask).unwrap()) as usize;
    }
    let px = |v: [[f64; 3]; 2]| Tensor::from_fn(&[3, 1, 2], |i| v[i % 2][i / 2]);
    let t = px([[0.55, 0.45, 0.0], [0.5, 0.5, 0.0]]);
    let s = px([[0.10, 0.90, 0.0], [0.5, 0.5, 0.0]]);
    let (avg, m) = average_argmax(&t, &s).unwrap();
    let example = (avg.data()[0] - 0.325).abs() < 1e-15 && (avg.data()[2] - 0.675).abs() < 1e-15 && m.data == vec![1, 0];
    Verdict::check(
        exact == 20 && prob_err < 1e-12 && example,
        format!("{exact}/20 slices bit-exact, max softmax deviation {prob_err:.1e}, worked example and tie {}", if example { "ok" } else { "wrong" }),
    )
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let overrides: Vec<String> = [
        "image_size=16",
        "nets.z_dim=16",
        "nets.w_dim=16",
        "nets.channels=[8,8,8]",
        "nets.label_hidden=[8,8]",
        small_counts(),
        "phase1.iterations=20",
        "phase1.checkpoint_every=10",
        "phase1.r1_interval=4",
        "phase2.iterations=20",
        "phase2.warmup_steps=4",
        "phase2.val_every=10",
        "seed=42",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let cfg = config::load(None, &overrides).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let ms: Vec<RunManifest> = dirs.iter().map(|d| commands::execute("pipeline", &cfg, d.path(), commands::pipeline).unwrap()).collect();
    let same_summary = ms[0].summary == ms[1].summary && !ms[0].summary.is_empty();
    let data = [tree_bytes(&dirs[0].path().join("data")), tree_bytes(&dirs[1].path().join("data"))];
    let same_data = data[0] == data[1] && !data[0].is_empty();
    let logs = ["phase1/log.json", "phase2/log.json"].iter().all(|l| fs::read(dirs[0].path().join(l)).unwrap() == fs::read(dirs[1].path().join(l)).unwrap());
    let n = read_split(&dirs[0].path().join("data/prep/test_target")).unwrap().len();
    Verdict::check(
        same_summary && same_data && logs,
        format!(
            "{} summary metrics identical: {same_summary}; {} synth/preproc files bit-identical: {same_data}; training logs identical: {logs}; {n} target test slices",
            ms[0].summary.len(),
            data[0].len()
        ),
    )
}

fn report_formatting() -> Verdict {
    let direct = MeanStd { mean: 0.704, std: 0.024 }.format_pct();
    let vol = |d: f64| VolumeMetrics {
        id: String::new(),
        vessels: MetricValues {
            dice: d,
            precision: d,
            recall: d,
            cldice: d,
        },
        brain: MetricValues::default(),
        flags: vec![],
    };
    let table = aggregate(&[vol(0.68), vol(0.728)]).unwrap().to_table();
    Verdict::check(
        direct == "70.4 ± 2.4" && table.contains("70.4 ± 2.4"),
        format!("0.704±0.024 renders as {direct:?}; aggregated table row {:?}", table.lines().nth(1).unwrap_or("").trim()),
    )
}
