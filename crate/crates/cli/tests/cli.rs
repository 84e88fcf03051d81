use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use igrad::data::{encode_image, ImagePayload};
use igrad::nn::load_checkpoint;
use igrad::nn::ArchitectureSpec;
use igrad::saliency::input_gradient_map;
use igrad::data::{synthetic_shapes, ShapeKind};
use igrad::tensor::GradMode;
use igrad::train::argmax;
use igrad::metrics::{Classifier, PixelModel};

fn igrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_igrad")).args(args).env("RUST_LOG", "warn").output().expect("run igrad")
}

fn config(dir: &Path, out: &str, lambda: f64, extra: &str) -> PathBuf {
    let text = format!(
        r#"{{
  "dataset": {{"kind": "synthetic", "train_size": 16, "test_size": 8, "hw": 8, "seed": 3}},
  "model": {{"architecture": "tinycnn", "seed": 1}},
  "train": {{"epochs": 2, "batch_size": 8, "base_lr": 0.05, "lr_decay_epochs": [1], "lr_decay_factor": 5,
            "lambda": {lambda}, "error_fn": "cosine", "seed": 4}},
  {extra}
  "output": {{"directory": "{}", "timing": false}}
}}"#,
        dir.join(out).display()
    );
    let path = dir.join(format!("{out}.json"));
    std::fs::write(&path, text).unwrap();
    path
}

fn ok(o: &Output) {
    assert!(o.status.success(), "status {:?}\nstdout {}\nstderr {}", o.status, String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
}

fn trained(dir: &Path, extra: &str) -> (PathBuf, PathBuf) {
    let cfg = config(dir, "run", 0.01, extra);
    ok(&igrad(&["train", cfg.to_str().unwrap()]));
    (cfg, dir.join("run").join("model.ckpt"))
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = config(dir.path(), "a", 0.0, "");
    let b = config(dir.path(), "b", 0.0, "");
    ok(&igrad(&["train", a.to_str().unwrap()]));
    ok(&igrad(&["train", b.to_str().unwrap()]));
    let log_a = std::fs::read_to_string(dir.path().join("a/train_log.csv")).unwrap();
    let log_b = std::fs::read_to_string(dir.path().join("b/train_log.csv")).unwrap();
    assert_eq!(log_a, log_b);
    let mut lines = log_a.lines();
    assert_eq!(lines.next().unwrap(), "epoch,lr,loss_c,loss_r,loss_total,train_acc,test_acc,seconds");
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[3], "0.0", "loss_r must be zero at lambda 0: {line}");
    }
    assert_eq!(std::fs::read(dir.path().join("a/model.ckpt")).unwrap(), std::fs::read(dir.path().join("b/model.ckpt")).unwrap());
    // the snapshot alone reproduces the run
    let resolved = std::fs::read_to_string(dir.path().join("a/resolved_config.json")).unwrap();
    assert!(resolved.contains("\"momentum\": 0.9"));
    let again = dir.path().join("again.json");
    std::fs::write(&again, resolved.replace(dir.path().join("a").to_str().unwrap(), dir.path().join("c").to_str().unwrap())).unwrap();
    ok(&igrad(&["train", again.to_str().unwrap()]));
    assert_eq!(std::fs::read_to_string(dir.path().join("c/train_log.csv")).unwrap(), log_a);
}

#[test]
fn missing_key_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "x", 0.0, "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace(r#""epochs": 2, "#, "");
    std::fs::write(&cfg, text).unwrap();
    let o = igrad(&["train", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.epochs"));
    assert!(!dir.path().join("x").exists(), "nothing may run before the config validates");
}

#[test]
fn eval_writes_one_row_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#""saliency": {"methods": ["gradcam", "scorecam"]}, "metrics": {"pixels_per_step": 16},"#;
    let (cfg, ckpt) = trained(dir.path(), extra);
    for (flag, expect) in [(None, "predicted"), (Some("ground_truth"), "ground_truth")] {
        let mut args = vec!["eval", cfg.to_str().unwrap(), ckpt.to_str().unwrap()];
        if let Some(f) = flag {
            args.extend(["--class-policy", f]);
        }
        let o = igrad(&args);
        ok(&o);
        assert!(String::from_utf8_lossy(&o.stdout).contains("test accuracy"));
        let csv = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
        let rows: Vec<&str> = csv.lines().collect();
        assert_eq!(rows.len(), 3, "{csv}");
        assert!(rows[1].starts_with(&format!("gradcam,{expect},8,")));
        assert!(rows[2].starts_with(&format!("scorecam,{expect},8,")));
    }
}

#[test]
fn eval_rejects_architecture_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = trained(dir.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("tinycnn", "miniresnet");
    std::fs::write(&cfg, text).unwrap();
    let o = igrad(&["eval", cfg.to_str().unwrap(), ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("architecture"));
}

#[test]
fn saliency_exports_overlays_and_gradient_maps() {
    let dir = tempfile::tempdir().unwrap();
    let extra = r#""saliency": {"methods": ["gradcam", "gradcam_pp", "axiomcam"]},"#;
    let (cfg, ckpt) = trained(dir.path(), extra);
    ok(&igrad(&["saliency", cfg.to_str().unwrap(), ckpt.to_str().unwrap(), "--ids", "5"]));
    let out = dir.path().join("run/saliency");
    let mut names: Vec<String> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(
        names,
        [
            "img00005_axiomcam.ppm",
            "img00005_grad_guided.pgm",
            "img00005_grad_standard.pgm",
            "img00005_gradcam.ppm",
            "img00005_gradcam_pp.ppm"
        ]
    );
    // the exported gradient maps are exactly the library's maps, quantized
    let model = load_checkpoint(&ckpt, &ArchitectureSpec::tinycnn([3, 8, 8], 4)).unwrap();
    let train = synthetic_shapes(16, &ShapeKind::ALL, 8, 3).unwrap();
    let test = synthetic_shapes(8, &ShapeKind::ALL, 8, 4).unwrap().with_stats(train.stats.clone()).unwrap();
    let clf = PixelModel { model: &model, stats: &test.stats };
    let class = argmax(&clf.probabilities(&test.images[5].pixels).unwrap());
    for (mode, tag) in [(GradMode::Standard, "grad_standard"), (GradMode::Guided, "grad_guided")] {
        let g = input_gradient_map(&model, &test.input(5), class, mode).unwrap();
        let expect = encode_image(&ImagePayload::Gray { width: 8, height: 8, values: &g }).unwrap();
        assert_eq!(std::fs::read(out.join(format!("img00005_{tag}.pgm"))).unwrap(), expect);
    }
}

#[test]
fn saliency_rejects_out_of_range_id() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ckpt) = trained(dir.path(), "");
    let o = igrad(&["saliency", cfg.to_str().unwrap(), ckpt.to_str().unwrap(), "--ids", "1,8"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("8"));
}

#[test]
fn gradcheck_gate() {
    let o = igrad(&["gradcheck", "--seeds", "2"]);
    ok(&o);
    let o = igrad(&["gradcheck", "--seeds", "1", "--fault-op", "relu"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("relu"), "{err}");
}

#[test]
fn bad_usage_exits_2() {
    assert_eq!(igrad(&["train"]).status.code(), Some(2));
    assert_eq!(igrad(&["eval", "a.json", "b.ckpt", "--class-policy", "random"]).status.code(), Some(2));
    assert_eq!(igrad(&["train", "/nonexistent/config.json"]).status.code(), Some(2));
}
