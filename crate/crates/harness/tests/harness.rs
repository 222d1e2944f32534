use std::fs;
use std::process::Command;

use hst_core::checkpoint;
use hst_harness::data::{parity_label, read_dataset, Split};
use hst_harness::sweep::{bottleneck_sweep, SWEEP_FILE, SWEEP_RUNS_FILE};
use hst_harness::train::{build_model, eval_roll, evaluate, METRICS_FILE, SUMMARY_FILE};
use hst_harness::{run_experiment, train_on, ExperimentConfig, HarnessError, Task};

fn tiny() -> ExperimentConfig {
    ExperimentConfig::default()
        .with_overrides(&[
            "task.length=16",
            "task.block=4",
            "task.train_size=64",
            "task.dev_size=16",
            "task.test_size=16",
            "model.g=1",
            "model.w=4",
            "model.d=8",
            "model.layers=1",
            "model.heads=2",
            "model.ffn_dim=16",
            "model.dropout.hidden=0.1",
            "train.steps=6",
            "train.batch_size=4",
            "train.warmup=2",
            "train.eval_every=3",
            "sar.enabled=true",
        ])
        .unwrap()
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut cfg = tiny();
    cfg.train.lr = 0.0;
    let data = cfg.resolved().task.generate(Split::Train).unwrap();
    let out = train_on(&cfg, &data, &data[..4], None).unwrap();
    let fresh = build_model(&cfg).unwrap();
    for id in fresh.params.ids() {
        assert_eq!(fresh.params.get(id).data, out.model.params.get(id).data);
    }
}

#[test]
fn identical_configs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_experiment(&tiny(), Some(&a)).unwrap();
    run_experiment(&tiny(), Some(&b)).unwrap();
    for f in [METRICS_FILE, SUMMARY_FILE] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let lines = fs::read_to_string(a.join(METRICS_FILE)).unwrap();
    let steps: Vec<u64> = lines
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    // SAR doubles the step budget
    assert_eq!(steps, vec![3, 6, 9, 12]);
}

#[test]
fn checkpoint_reproduces_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&tiny(), Some(dir.path())).unwrap();
    let loaded = checkpoint::load(&dir.path().join("checkpoint")).unwrap();
    let content = vec![3, 4, 5, 6, 7, 8, 3, 4];
    assert_eq!(out.model.predict(&content, None).unwrap(), loaded.predict(&content, None).unwrap());
}

#[test]
fn sweep_csv_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.save_checkpoint = false;
    let run = |p: &std::path::Path| bottleneck_sweep(&cfg, &[0, 2], 1, Some(p), |_| {}).unwrap();
    let r = run(&dir.path().join("a"));
    run(&dir.path().join("b"));
    assert_eq!(r.rows.len(), 4);
    for f in [SWEEP_FILE, SWEEP_RUNS_FILE] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
    let text = fs::read_to_string(dir.path().join("a").join(SWEEP_FILE)).unwrap();
    assert!(text.starts_with("model,g,mean_acc,std_acc\nST,0,"));
}

#[test]
fn divergence_aborts_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.train.lr = 1e300;
    cfg.train.warmup = 0;
    let err = run_experiment(&cfg, Some(dir.path())).err().expect("must diverge");
    assert!(matches!(err, HarnessError::Diverged { .. }), "{err}");
    let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert!(text.lines().last().unwrap().contains("\"diverged\":true"));
}

#[test]
fn evaluation_divergence() {
    let cfg = tiny().resolved();
    let model = build_model(&cfg).unwrap();
    let data = cfg.task.generate(Split::Dev).unwrap();
    let mut no_roll = cfg.sar.clone();
    no_roll.roll_tokens = 0;
    assert_eq!(evaluate(&model, &data, eval_roll(&no_roll)).unwrap().divergence, 0.0);

    // untrained model with generic weights on an 8-token topology
    let mut small = cfg.clone();
    small.model.init_std = 0.5;
    small.task.length = 7;
    small.task.block = 7;
    small.model.w = 7;
    let small = small.resolved();
    let model = build_model(&small).unwrap();
    let seqs = vec![(vec![3, 4, 5, 6, 7, 8, 3], 0)];
    assert!(evaluate(&model, &seqs, eval_roll(&small.sar)).unwrap().divergence > 0.0);
}

#[test]
fn constant_correct_model_scores_one() {
    let cfg = tiny().resolved();
    let mut model = build_model(&cfg).unwrap();
    let d = cfg.model.d;
    let (g, b, w) = (model.ids.ln_f_g, model.ids.ln_f_b, model.ids.w_o);
    model.params.set(g, vec![0.0; d]).unwrap();
    let mut bias = vec![0.0; d];
    bias[0] = 1.0;
    model.params.set(b, bias).unwrap();
    let mut wo = vec![0.0; d * 2];
    wo[1] = 10.0;
    model.params.set(w, wo).unwrap();
    let data: Vec<_> = cfg.task.generate(Split::Dev).unwrap().into_iter().map(|(x, _)| (x, 1)).collect();
    assert_eq!(evaluate(&model, &data, None).unwrap().accuracy, 1.0);
}

#[test]
fn parity_labels_are_balanced_and_stable() {
    let mut cfg = ExperimentConfig::default();
    cfg.task.test_size = 5000;
    let a = cfg.task.generate(Split::Test).unwrap();
    assert_eq!(a, cfg.task.generate(Split::Test).unwrap());
    let ones = a.iter().filter(|(_, y)| *y == 1).count() as f64 / a.len() as f64;
    let majority = ones.max(1.0 - ones);
    assert!((majority - 0.5).abs() <= 0.02, "{majority}");
    assert!(a.iter().all(|(x, y)| parity_label(x) == *y));
    assert_ne!(a, cfg.task.generate(Split::Dev).unwrap()[..]);
}

fn hst() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hst"))
}

#[test]
fn cli_round_trip() {
    let root = tempfile::tempdir().unwrap();
    let cfg_path = root.path().join("tiny.toml");
    fs::write(&cfg_path, toml::to_string(&tiny()).unwrap()).unwrap();
    let cfg = cfg_path.to_str().unwrap();

    let out = hst().env("HST_OUTPUT_ROOT", root.path()).args(["gen-data", "-c", cfg]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (data, side) = read_dataset(&root.path().join("data/dev.bin")).unwrap();
    assert_eq!(data.len(), 16);
    assert_eq!(side.spec.task, Task::CrossBlockParity);

    let out = hst()
        .env("HST_OUTPUT_ROOT", root.path())
        .args(["train", "-c", cfg, "--name", "t", "--set", "train.steps=2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(root.path().join("t/summary.csv").exists());

    let ckpt = root.path().join("t/checkpoint");
    let dev = root.path().join("data/dev.bin");
    let out = hst()
        .args(["eval", "-c", cfg, "--checkpoint", ckpt.to_str().unwrap(), "--data", dev.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["examples"], 16);

    let out = hst().args(["inspect-topology", "--set", "model.g=1", "--set", "task.length=8", "--set", "model.w=4"]).output().unwrap();
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["n"], 11);
    assert_eq!(v["rep_positions"], serde_json::json!([1, 6]));

    let out = hst().args(["train", "--set", "train.bogus=1"]).output().unwrap();
    assert!(!out.status.success());
    let e: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(e["error"], "config");
}
