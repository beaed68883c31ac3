use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vesselda::commands::{self, read_split, Run};
use vesselda::config::{self, RunConfig};
use vesselda::container;
use vesselda::manifest::{RunManifest, RunStatus};
use vesselda_core::metrics::MetricsReport;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vesselda")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn manifest(root: &Path, command: &str) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(root.join("manifests").join(format!("{command}.json"))).unwrap()).unwrap()
}

/// Tiny networks, short schedules, few samples.
fn tiny_overrides() -> Vec<String> {
    [
        "image_size=8",
        "nets.z_dim=8",
        "nets.w_dim=8",
        "nets.mapping_layers=2",
        "nets.channels=[4,4]",
        "nets.label_hidden=[4,4]",
        "nets.perceptual_channels=[2,2,2,2]",
        "synthgen.counts={\"source_labeled\":3,\"target_unlabeled\":2,\"target_labeled\":1,\"val\":1,\"test_source\":2,\"test_target\":2}",
        "phase1.iterations=6",
        "phase1.batch_size=2",
        "phase1.checkpoint_every=3",
        "phase1.r1_interval=2",
        "phase2.iterations=6",
        "phase2.batch_size=2",
        "phase2.warmup_steps=2",
        "phase2.val_every=3",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

pub fn tiny_config() -> RunConfig {
    config::load(None, &tiny_overrides()).unwrap()
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, "{\n  \"seed\": 1,\n  \"sato\": {\n    \"sigma_max\": 3\n  }\n}\n").unwrap();
    let out = bin(&["synth", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sato.sigma_max") && err.contains("line 4"), "{err}");
    assert!(!dir.path().join("r").exists());
}

#[test]
fn malformed_override_and_bad_value_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().to_str().unwrap();
    assert_eq!(bin(&["synth", "--out", r, "--set", "phase1.batch_size=1"]).status.code(), Some(2));
    assert_eq!(bin(&["synth", "--out", r, "--set", "novalue"]).status.code(), Some(2));
    assert_eq!(bin(&["synth", "--config", "/nonexistent/c.json", "--out", r]).status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_1_with_failed_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["train-phase1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let m = manifest(dir.path(), "train-phase1");
    assert_eq!(m.status, RunStatus::Failed);
    assert!(m.error.unwrap().contains("no preprocessed training data"));
    assert!(!dir.path().join(".lock").exists());
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".lock"), "1").unwrap();
    let out = bin(&["synth", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn evaluate_identical_directories_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config();
    commands::execute("synth", &cfg, root, commands::synth).unwrap();
    let gt = root.join("data/raw/test_target");
    let pred = root.join("pred");
    for s in read_split(&gt).unwrap() {
        let l = s.labels.unwrap();
        container::write_labels(&pred, &format!("{:05}.mask", s.id), &l, &container::Sidecar::labels(&l, [0.5, 0.5], None, None)).unwrap();
    }
    let report = root.join("eval/report.json");
    let out = bin(&["evaluate", "--pred", pred.to_str().unwrap(), "--gt", gt.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r: MetricsReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for m in r.vessels.as_array().iter().chain(r.brain.as_array().iter()) {
        assert_eq!((m.mean, m.std), (1.0, 0.0));
    }
    assert!(fs::read_to_string(report.with_extension("txt")).unwrap().contains("100.0 ± 0.0"));
    let m = manifest(&root.join("eval"), "evaluate");
    assert_eq!(m.summary["vessel_dice"], 1.0);
    assert_eq!(m.inputs.len(), 2 * r.volumes.len());
}

#[test]
fn sato_baseline_command_with_flags() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config();
    commands::execute("synth", &cfg, root, commands::synth).unwrap();
    let input = root.join("data/raw/test_source");
    let out_dir = root.join("sato");
    let out = bin(&["baseline-sato", "--in", input.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--scales", "1,2,3", "--polarity", "bright"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&out_dir, "baseline-sato");
    assert_eq!(m.config["sato"]["scales_px"], serde_json::json!([1.0, 2.0, 3.0]));
    assert_eq!(m.summary["failed_slices"], 0.0);
    assert!(m.summary["mean_vessel_dice"] > 0.0);
    assert_eq!(container::list_stems(&out_dir, ".mask").unwrap().len(), 2);
}

#[test]
fn pipeline_then_batch_inference() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config();
    let m = commands::execute("pipeline", &cfg, root, commands::pipeline).unwrap();
    for k in ["target_vessel_dice", "source_vessel_dice", "sato_target_vessel_dice", "sato_source_vessel_dice", "phase1_ks_start", "phase1_ks_end"] {
        assert!(m.summary[k].is_finite(), "{k}");
    }
    for a in &m.artifacts {
        assert!(root.join(a).exists(), "{a}");
    }
    assert!(root.join("figures/test_target_mip.png").exists());
    assert!(root.join("figures/test_source_minip.png").exists());
    assert!(root.join("figures/test_target_middle_pred.png").exists());

    // Per-file failures do not abort the batch, and report Dice matches an
    // offline recomputation from the persisted masks.
    let input = root.join("batch_in");
    let prep = root.join("data/prep/test_target");
    fs::create_dir_all(&input).unwrap();
    for e in fs::read_dir(&prep).unwrap() {
        let p = e.unwrap().path();
        fs::copy(&p, input.join(p.file_name().unwrap())).unwrap();
    }
    fs::write(input.join("00999.img.json"), "{not json").unwrap();
    fs::write(input.join("00999.img.raw"), [0u8; 3]).unwrap();
    let out_dir = root.join("batch_out");
    let ckpt = root.join("phase2/ckpt");
    let mut run = Run::new(&cfg, root);
    let rep = commands::infer_batch(&mut run, &ckpt, &input, &out_dir).unwrap();
    assert_eq!(rep.slices.len(), 3);
    let bad = rep.slices.iter().find(|s| s.stem == "00999.img").unwrap();
    assert!(!bad.ok && bad.error.is_some());
    for s in rep.slices.iter().filter(|s| s.ok) {
        let id = container::stem_id(&s.stem).unwrap();
        let (pred, _) = container::read_labels(&out_dir, &format!("{id:05}.mask")).unwrap();
        let (gt, _) = container::read_labels(&input, &container::labels_stem(id)).unwrap();
        let d = vesselda_core::metrics::evaluate_volume("x", &[pred], &[gt]).unwrap().vessels.dice;
        assert_eq!(Some(d), s.vessel_dice);
    }
    // Same inputs twice give identical masks.
    let out2 = root.join("batch_out2");
    let rep2 = commands::infer_batch(&mut run, &ckpt, &input, &out2).unwrap();
    assert_eq!(rep, rep2);
    for stem in container::list_stems(&out_dir, ".mask").unwrap() {
        assert_eq!(fs::read(container::raw_path(&out_dir, &stem)).unwrap(), fs::read(container::raw_path(&out2, &stem)).unwrap());
    }

    let empty = root.join("empty");
    fs::create_dir_all(&empty).unwrap();
    let rep = commands::infer_batch(&mut run, &ckpt, &empty, &root.join("empty_out")).unwrap();
    assert!(rep.slices.is_empty() && rep.mean_vessel_dice.is_none());

    // An untrained (Phase 1) checkpoint is refused.
    assert!(commands::infer_batch(&mut run, &root.join("phase1/ckpt"), &input, &root.join("x")).is_err());
}

#[test]
fn figures_skip_missing_masks() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = tiny_config();
    commands::execute("synth", &cfg, root, commands::synth).unwrap();
    commands::execute("preprocess", &cfg, root, commands::preprocess).unwrap();
    let m = commands::execute("figures", &cfg, root, commands::figures).unwrap();
    assert!(root.join("figures/test_target_mip.png").exists());
    assert!(m.artifacts.iter().all(|a| !a.contains("_pred")));
}
