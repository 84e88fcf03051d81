use std::path::Path;

use igrad::data::{write_image, ImagePayload};
use igrad::metrics::{evaluate_method, save_metrics_csv, ClassPolicy, Classifier, PixelModel};
use igrad::nn::{build_model, load_checkpoint};
use igrad::saliency::{input_gradient_map, Explainer};
use igrad::tensor::GradMode;
use igrad::train::{argmax, evaluate_accuracy, fit, FitOptions};
use igrad::verify::{run_gradcheck, GradcheckConfig};
use igrad::{Error, Execution, Result};

use crate::config::{load_config, RunConfig};

pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const METRICS: &str = "metrics.csv";

fn prepare_output(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output.directory)
        .map_err(|e| Error::Config(format!("output.directory {}: {e}", cfg.output.directory.display())))
}

fn check_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

pub fn train(config: &Path, exec: Execution) -> Result<u8> {
    let cfg = load_config(config)?;
    prepare_output(&cfg)?;
    let out = &cfg.output.directory;
    let resolved = serde_json::to_string_pretty(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(out.join(RESOLVED_CONFIG), resolved + "\n")?;
    let (train, test) = cfg.load_datasets()?;
    let mut model = build_model(&cfg.architecture()?, cfg.model.seed)?;
    log::info!(
        "training {} ({} parameters) on {} images, lambda {} with {}",
        cfg.model.architecture,
        model.param_count(),
        train.len(),
        cfg.train.lambda,
        cfg.train.error_fn
    );
    let opts = FitOptions { checkpoint: Some(out.join(CHECKPOINT)), exec, skip_test_eval: false };
    let mut log = fit(&mut model, &train, Some(&test), &cfg.train, &opts)?;
    if !cfg.output.timing {
        log.records.iter_mut().for_each(|r| r.seconds = 0.0);
    }
    log.save_csv(&out.join(TRAIN_LOG))?;
    if let Some(r) = log.last() {
        println!("final test accuracy {:.4}", r.test_acc);
    }
    Ok(0)
}

pub fn eval(config: &Path, checkpoint: &Path, policy: Option<ClassPolicy>, exec: Execution) -> Result<u8> {
    let cfg = load_config(config)?;
    check_file(checkpoint, "checkpoint")?;
    prepare_output(&cfg)?;
    let model = load_checkpoint(checkpoint, &cfg.architecture()?)?;
    let (_, test) = cfg.load_datasets()?;
    let test = match cfg.metrics.limit {
        Some(n) => test.truncate(n),
        None => test,
    };
    let policy = policy.unwrap_or(cfg.saliency.class_policy);
    println!("test accuracy {:.4}", evaluate_accuracy(&model, &test, exec)?);
    let curves = cfg.metrics.causal_curves.then(|| cfg.metrics.curves());
    let mut reports = Vec::new();
    for &method in &cfg.saliency.methods {
        let r = evaluate_method(&model, &test, method, &cfg.saliency.layer, policy, curves.as_ref(), exec)?;
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        println!(
            "{:<12} AD {:6.2}  AG {:6.2}  AI {:6.2}  ins {:>6}  del {:>6}",
            r.method,
            r.scores.ad,
            r.scores.ag,
            r.scores.ai,
            fmt(r.insertion),
            fmt(r.deletion)
        );
        reports.push(r);
    }
    save_metrics_csv(&reports, &cfg.output.directory.join(METRICS))?;
    Ok(0)
}

/// File name for one exported image.
pub fn image_name(id: usize, kind: &str, ext: &str) -> String {
    format!("img{id:05}_{kind}.{ext}")
}

pub fn saliency(config: &Path, checkpoint: &Path, ids: &[usize]) -> Result<u8> {
    let cfg = load_config(config)?;
    check_file(checkpoint, "checkpoint")?;
    let model = load_checkpoint(checkpoint, &cfg.architecture()?)?;
    let (_, test) = cfg.load_datasets()?;
    if let Some(&bad) = ids.iter().find(|&&i| i >= test.len()) {
        return Err(Error::Config(format!("image id {bad} out of range for {} test images", test.len())));
    }
    let dir = cfg.output.directory.join("saliency");
    std::fs::create_dir_all(&dir)?;
    let [c, h, w] = model.input_shape();
    let explainers = cfg
        .saliency
        .methods
        .iter()
        .map(|&m| Explainer::new(&model, m, &cfg.saliency.layer))
        .collect::<Result<Vec<_>>>()?;
    let clf = PixelModel { model: &model, stats: &test.stats };
    for &id in ids {
        let img = &test.images[id];
        let class = match cfg.saliency.class_policy {
            ClassPolicy::Predicted => argmax(&clf.probabilities(&img.pixels)?),
            ClassPolicy::GroundTruth => img.label,
        };
        let x = test.input(id);
        for e in &explainers {
            let map = e.explain(&x, class)?;
            let payload = ImagePayload::Overlay { width: w, height: h, channels: c, image: &img.pixels, saliency: &map.normalized };
            write_image(&dir.join(image_name(id, e.method().as_str(), "ppm")), &payload)?;
        }
        for (mode, tag) in [(GradMode::Standard, "grad_standard"), (GradMode::Guided, "grad_guided")] {
            let g = input_gradient_map(&model, &x, class, mode)?;
            write_image(&dir.join(image_name(id, tag, "pgm")), &ImagePayload::Gray { width: w, height: h, values: &g })?;
        }
        log::info!("image {id} (label {}, explained class {class}) written to {}", img.label, dir.display());
    }
    Ok(0)
}

pub fn gradcheck(seeds: u64, fault: Option<String>) -> Result<u8> {
    let cfg = GradcheckConfig { seeds, fault, ..Default::default() };
    let report = run_gradcheck(&cfg)?;
    for c in &report.checks {
        println!(
            "{} {:<36} cases {:>4}  max error {:.3e}  (tolerance {:.0e})",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.cases,
            c.max_error,
            c.tolerance
        );
    }
    println!("{} checks in {:.1}s", report.checks.len(), report.seconds);
    let failures = report.failures();
    if failures.is_empty() {
        Ok(0)
    } else {
        let names: Vec<&str> = failures.iter().map(|c| c.name.as_str()).collect();
        eprintln!("gradcheck failed: {}", names.join(", "));
        Ok(1)
    }
}
