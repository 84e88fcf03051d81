use std::path::{Path, PathBuf};

use igrad::data::{parse_cifar, synthetic_shapes, CifarVariant, Dataset, NormStats, ShapeKind};
use igrad::metrics::{ClassPolicy, CurveConfig};
use igrad::nn::{ArchitectureSpec, LAST_CONV};
use igrad::saliency::CamMethod;
use igrad::train::TrainConfig;
use igrad::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub saliency: SaliencyConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        train_size: usize,
        test_size: usize,
        hw: usize,
        seed: u64,
        #[serde(default = "all_shapes")]
        shapes: Vec<ShapeKind>,
    },
    Cifar10 {
        train_path: PathBuf,
        test_path: PathBuf,
        #[serde(default = "cifar10_stats")]
        stats: NormStats,
    },
    Cifar100 {
        train_path: PathBuf,
        test_path: PathBuf,
        #[serde(default = "cifar100_stats")]
        stats: NormStats,
    },
}

fn all_shapes() -> Vec<ShapeKind> {
    ShapeKind::ALL.to_vec()
}

/// Conventional per-channel CIFAR-10 statistics.
pub fn cifar10_stats() -> NormStats {
    NormStats { mean: vec![0.4914, 0.4822, 0.4465], std: vec![0.2470, 0.2435, 0.2616] }
}

/// Conventional per-channel CIFAR-100 statistics.
pub fn cifar100_stats() -> NormStats {
    NormStats { mean: vec![0.5071, 0.4865, 0.4409], std: vec![0.2673, 0.2564, 0.2762] }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: String,
    pub seed: u64,
}

fn default_methods() -> Vec<CamMethod> {
    vec![CamMethod::GradCam]
}

fn default_layer() -> String {
    LAST_CONV.to_string()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaliencyConfig {
    #[serde(default = "default_methods")]
    pub methods: Vec<CamMethod>,
    #[serde(default = "default_layer")]
    pub layer: String,
    #[serde(default)]
    pub class_policy: ClassPolicy,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self { methods: default_methods(), layer: default_layer(), class_policy: ClassPolicy::Predicted }
    }
}

fn yes() -> bool {
    true
}

fn default_blur_kernel() -> usize {
    CurveConfig::default().blur_kernel
}

fn default_blur_sigma() -> f64 {
    CurveConfig::default().blur_sigma
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    #[serde(default)]
    pub pixels_per_step: Option<usize>,
    #[serde(default = "default_blur_kernel")]
    pub blur_kernel: usize,
    #[serde(default = "default_blur_sigma")]
    pub blur_sigma: f64,
    #[serde(default)]
    pub deletion_fill: f64,
    /// Compute insertion / deletion curves (costly: many passes per image).
    #[serde(default = "yes")]
    pub causal_curves: bool,
    /// Evaluate only the first `limit` test images.
    #[serde(default)]
    pub limit: Option<usize>,
}

impl MetricsConfig {
    pub fn curves(&self) -> CurveConfig {
        CurveConfig {
            pixels_per_step: self.pixels_per_step,
            blur_kernel: self.blur_kernel,
            blur_sigma: self.blur_sigma,
            deletion_fill: self.deletion_fill,
        }
    }
}

impl Default for MetricsConfig {
    fn default() -> Self {
        let c = CurveConfig::default();
        Self {
            pixels_per_step: c.pixels_per_step,
            blur_kernel: c.blur_kernel,
            blur_sigma: c.blur_sigma,
            deletion_fill: c.deletion_fill,
            causal_curves: true,
            limit: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    /// Record wall-clock seconds per epoch in the training log. Turn off for
    /// byte-reproducible logs.
    #[serde(default = "yes")]
    pub timing: bool,
}

/// Reads and validates a config file. Schema errors carry the key path.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let mut path = e.path().to_string();
        let msg = e.inner().to_string();
        // `missing field` errors point at the parent; name the key itself
        if let Some(field) = msg.strip_prefix("missing field `").and_then(|r| r.split('`').next()) {
            path = if path == "." { field.to_string() } else { format!("{path}.{field}") };
        }
        Error::Config(format!("{path}: {msg}"))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.metrics.causal_curves {
            self.metrics.curves().validate()?;
        }
        if self.metrics.limit == Some(0) {
            return Err(Error::Config("metrics.limit must be at least 1".into()));
        }
        if self.saliency.methods.is_empty() {
            return Err(Error::Config("saliency.methods must list at least one method".into()));
        }
        match &self.dataset {
            DatasetConfig::Synthetic { train_size, test_size, hw, shapes, .. } => {
                if shapes.is_empty() || *train_size < shapes.len() || *test_size < shapes.len() {
                    return Err(Error::Config("dataset: each split needs at least one image per shape".into()));
                }
                if *hw < 8 {
                    return Err(Error::Config(format!("dataset.hw must be at least 8, got {hw}")));
                }
            }
            DatasetConfig::Cifar10 { train_path, test_path, stats } | DatasetConfig::Cifar100 { train_path, test_path, stats } => {
                stats.validate(3).map_err(|e| Error::Config(format!("dataset.stats: {e}")))?;
                for (key, p) in [("dataset.train_path", train_path), ("dataset.test_path", test_path)] {
                    if !p.is_file() {
                        return Err(Error::Config(format!("{key}: {} does not exist", p.display())));
                    }
                }
            }
        }
        self.architecture()?.shape_chain()?;
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match &self.dataset {
            DatasetConfig::Synthetic { hw, .. } => [3, *hw, *hw],
            _ => [3, 32, 32],
        }
    }

    pub fn classes(&self) -> usize {
        match &self.dataset {
            DatasetConfig::Synthetic { shapes, .. } => shapes.len(),
            DatasetConfig::Cifar10 { .. } => 10,
            DatasetConfig::Cifar100 { .. } => 100,
        }
    }

    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        ArchitectureSpec::named(&self.model.architecture, self.input_shape(), self.classes())
            .map_err(|e| Error::Config(format!("model.architecture: {e}")))
    }

    /// Train and test splits, both normalized with the training statistics.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.dataset {
            DatasetConfig::Synthetic { train_size, test_size, hw, seed, shapes } => {
                let train = synthetic_shapes(*train_size, shapes, *hw, *seed)?;
                let test = synthetic_shapes(*test_size, shapes, *hw, seed.wrapping_add(1))?.with_stats(train.stats.clone())?;
                Ok((train, test))
            }
            DatasetConfig::Cifar10 { train_path, test_path, stats } => Ok((
                parse_cifar(train_path, CifarVariant::Cifar10, stats.clone())?,
                parse_cifar(test_path, CifarVariant::Cifar10, stats.clone())?,
            )),
            DatasetConfig::Cifar100 { train_path, test_path, stats } => Ok((
                parse_cifar(train_path, CifarVariant::Cifar100, stats.clone())?,
                parse_cifar(test_path, CifarVariant::Cifar100, stats.clone())?,
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "dataset": {"kind": "synthetic", "train_size": 8, "test_size": 4, "hw": 8, "seed": 1},
        "model": {"architecture": "tinycnn", "seed": 0},
        "train": {"epochs": 1, "batch_size": 4, "base_lr": 0.05, "lr_decay_epochs": [], "lr_decay_factor": 5,
                  "lambda": 0.0, "error_fn": "cosine", "seed": 0},
        "output": {"directory": "out"}
    }"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.train.weight_decay, 5e-4);
        assert_eq!(c.saliency.methods, vec![CamMethod::GradCam]);
        assert_eq!(c.metrics.blur_kernel, 5);
        assert!(c.output.timing);
        let again = parse_config(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn missing_key_names_its_path() {
        let text = MINIMAL.replace(r#""epochs": 1, "#, "");
        let e = parse_config(&text).unwrap_err().to_string();
        assert!(e.contains("train.epochs"), "{e}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = MINIMAL.replace(r#""lambda": 0.0"#, r#""lambda": 0.0, "lamda": 1"#);
        let e = parse_config(&text).unwrap_err().to_string();
        assert!(e.contains("lamda"), "{e}");
        let text = MINIMAL.replace(r#""seed": 1}"#, r#""seed": 1, "extra": 2}"#);
        assert!(parse_config(&text).is_err());
    }

    #[test]
    fn missing_cifar_path_rejected_up_front() {
        let text = MINIMAL.replace(
            r#"{"kind": "synthetic", "train_size": 8, "test_size": 4, "hw": 8, "seed": 1}"#,
            r#"{"kind": "cifar100", "train_path": "/nonexistent/train.bin", "test_path": "/nonexistent/test.bin"}"#,
        );
        let e = parse_config(&text).unwrap_err().to_string();
        assert!(e.contains("dataset.train_path"), "{e}");
    }
}
