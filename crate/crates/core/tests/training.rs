//! Small in-memory runs of the whole chain: phantoms, preprocessing, both
//! training phases, inference and scoring.

use vesselda_core::data::{MixedSampler, TrainItem};
use vesselda_core::infer::Segmenter;
use vesselda_core::metrics::{aggregate, evaluate_volume};
use vesselda_core::nets::{ArchConfig, Networks};
use vesselda_core::phase1::{ks_statistic, sample_generator, Phase1Config, Phase1Event, Phase1Trainer};
use vesselda_core::phase2::{Phase2Config, Phase2Event, Phase2Trainer};
use vesselda_core::preproc::{preprocess_slice, PreprocConfig};
use vesselda_core::synthgen::{make_split, LabeledSample, PhantomSpec, SplitCounts};
use vesselda_core::tensor::Tensor;
use vesselda_core::Error;

const SIZE: usize = 16;

fn arch() -> ArchConfig {
    let mut a = ArchConfig::desk(SIZE);
    a.z_dim = 16;
    a.w_dim = 16;
    a.mapping_layers = 2;
    a.channels = vec![8, 8, 8];
    a.label_hidden = (8, 8);
    a.perceptual_channels = vec![4, 4, 4, 4];
    a
}

fn prep() -> PreprocConfig {
    PreprocConfig {
        target_spacing_mm: [2.0; 3],
        size: SIZE,
        ..Default::default()
    }
}

fn item(s: &LabeledSample, labeled: bool) -> TrainItem<f32> {
    let masks = (s.brain_mask.clone(), s.vessel_mask.clone());
    let p = preprocess_slice(&s.image, [0.5, 0.5], Some((&masks.0, &masks.1)), &prep()).unwrap();
    TrainItem::new(&p.image, s.domain, if labeled { p.labels.as_ref() } else { None }).unwrap()
}

struct Data {
    source: Vec<TrainItem<f32>>,
    target: Vec<TrainItem<f32>>,
    val: Vec<TrainItem<f32>>,
    test: Vec<TrainItem<f32>>,
}

fn data(seed: u64) -> Data {
    let counts = SplitCounts {
        source_labeled: 4,
        target_unlabeled: 3,
        target_labeled: 1,
        val: 1,
        test_source: 1,
        test_target: 2,
    };
    let split = make_split(&PhantomSpec::source(0), &PhantomSpec::target(0), counts, seed).unwrap();
    let mut target: Vec<TrainItem<f32>> = split.target_unlabeled.iter().map(|u| item(u.reveal_for_evaluation(), false)).collect();
    target.extend(split.target_labeled.iter().map(|s| item(s, true)));
    Data {
        source: split.source_labeled.iter().map(|s| item(s, true)).collect(),
        target,
        val: split.val.iter().map(|s| item(s, true)).collect(),
        test: split.test_target.iter().map(|s| item(s, true)).collect(),
    }
}

fn pixels(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

#[test]
fn both_phases_then_inference() {
    let d = data(3);
    let (nets, store) = Networks::new::<f32>(&arch(), 1).unwrap();
    let p1 = Phase1Config {
        iterations: 12,
        batch_size: 2,
        r1_interval: 4,
        checkpoint_every: 6,
        log_every: 3,
        ..Default::default()
    };
    let sampler = MixedSampler::new(d.source.clone(), d.target.clone(), true).unwrap();
    let mut t1 = Phase1Trainer::new(nets.clone(), store, p1).unwrap();
    let (mut logged, mut checkpoints) = (0, 0);
    t1.run(&sampler, &mut |ev| match ev {
        Phase1Event::Logged(s) => {
            assert!(s.all_finite());
            logged += 1;
        }
        Phase1Event::Checkpoint(_) => checkpoints += 1,
        Phase1Event::RolledBack { .. } => {}
    })
    .unwrap();
    assert_eq!(t1.state.iteration, 12);
    assert_eq!((logged, checkpoints), (4, 2));
    let fake = sample_generator(&nets, &t1.state.ema, 4, 9).unwrap();
    let real: Vec<f64> = d.source.iter().flat_map(|it| pixels(&it.image)).collect();
    let ks = ks_statistic(&pixels(&fake), &real);
    assert!((0.0..=1.0).contains(&ks));

    // Phase 1 weights alone cannot segment.
    assert!(matches!(Segmenter::new(&nets, &t1.state.ema, 0), Err(Error::NotReady(_))));

    let p2 = Phase2Config {
        iterations: 9,
        batch_size: 2,
        warmup_steps: 3,
        val_every: 3,
        log_every: 3,
        ..Default::default()
    };
    let mut t2 = Phase2Trainer::new(nets.clone(), t1.state.ema.clone(), p2).unwrap();
    let mut validations = Vec::new();
    t2.run(&sampler, &d.val, &mut |ev| {
        if let Phase2Event::Validated(v) = ev {
            validations.push(v.clone());
        }
    })
    .unwrap();
    assert_eq!(t2.state.iteration, 9);
    assert!(validations.len() >= 3);
    assert!(validations.iter().all(|v| (0.0..=1.0).contains(&v.dice) && v.recon_mse.is_finite()));
    assert!(t2.best.is_some());

    let seg = Segmenter::new(&nets, t2.final_store(), t2.state.iteration).unwrap();
    let images = Tensor::stack(&d.test.iter().map(|it| it.image.clone()).collect::<Vec<_>>()).unwrap();
    let results = seg.infer(&images).unwrap();
    let vols: Vec<_> = results
        .iter()
        .zip(&d.test)
        .enumerate()
        .map(|(i, (r, it))| {
            let oh = it.labels.as_ref().unwrap();
            let gt = vesselda_core::image::LabelImage::from_fn(SIZE, SIZE, |y, x| {
                (0..3u8).max_by(|&a, &b| oh.data()[(a as usize * SIZE + y) * SIZE + x].total_cmp(&oh.data()[(b as usize * SIZE + y) * SIZE + x])).unwrap()
            });
            assert_eq!(r.mask.height, SIZE);
            evaluate_volume(&i.to_string(), std::slice::from_ref(&r.mask), &[gt]).unwrap()
        })
        .collect();
    let report = aggregate(&vols).unwrap();
    for m in report.vessels.as_array().iter().chain(report.brain.as_array().iter()) {
        assert!((0.0..=1.0).contains(&m.mean));
    }
}

#[test]
fn training_is_reproducible() {
    let run = || {
        let d = data(5);
        let (nets, store) = Networks::new::<f32>(&arch(), 2).unwrap();
        let sampler = MixedSampler::new(d.source, d.target, true).unwrap();
        let cfg = Phase1Config {
            iterations: 4,
            batch_size: 2,
            seed: 7,
            ..Default::default()
        };
        let mut t1 = Phase1Trainer::new(nets.clone(), store, cfg).unwrap();
        t1.run(&sampler, &mut |_| {}).unwrap();
        let cfg = Phase2Config {
            iterations: 4,
            batch_size: 2,
            warmup_steps: 2,
            seed: 7,
            ..Default::default()
        };
        let mut t2 = Phase2Trainer::new(nets, t1.state.ema.clone(), cfg).unwrap();
        t2.run(&sampler, &d.val, &mut |_| {}).unwrap();
        (t1.history.clone(), t2.history.clone(), t2.state.store.clone())
    };
    assert!(run() == run());
}
