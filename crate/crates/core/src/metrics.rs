//! Faithfulness of saliency maps: average drop / gain / increase under
//! saliency masking, and insertion / deletion curves.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormStats};
use crate::error::{arg_err, Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::nn::Model;
use crate::saliency::{CamMethod, Explainer};
use crate::tensor::Tensor;
use crate::train::argmax;

/// Anything that maps a pixel-space image to class probabilities.
pub trait Classifier: Sync {
    /// `[channels, height, width]`
    fn image_shape(&self) -> [usize; 3];

    fn probabilities(&self, pixels: &[f64]) -> Result<Vec<f64>>;

    fn probabilities_batch(&self, images: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|x| self.probabilities(x)).collect()
    }
}

/// A model applied after per-channel normalization.
pub struct PixelModel<'a> {
    pub model: &'a Model,
    pub stats: &'a NormStats,
}

impl Classifier for PixelModel<'_> {
    fn image_shape(&self) -> [usize; 3] {
        self.model.input_shape()
    }

    fn probabilities(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        Ok(self.probabilities_batch(&[pixels.to_vec()])?.remove(0))
    }

    fn probabilities_batch(&self, images: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let [c, h, w] = self.model.input_shape();
        let data: Vec<f64> = images.iter().flat_map(|x| self.stats.normalize(x)).collect();
        let p = self.model.forward(&Tensor::new(vec![images.len(), c, h, w], data)?)?.probabilities;
        let k = self.model.classes();
        Ok(p.data().chunks(k).map(<[f64]>::to_vec).collect())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassPolicy {
    /// Explain the model's top prediction.
    #[default]
    Predicted,
    /// Explain the labeled class.
    GroundTruth,
}

impl ClassPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassPolicy::Predicted => "predicted",
            ClassPolicy::GroundTruth => "ground_truth",
        }
    }
}

impl std::str::FromStr for ClassPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predicted" => Ok(Self::Predicted),
            "ground_truth" => Ok(Self::GroundTruth),
            other => Err(Error::Config(format!("unknown class policy `{other}`"))),
        }
    }
}

fn default_blur_kernel() -> usize {
    5
}

fn default_blur_sigma() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveConfig {
    /// Pixels revealed or removed per step; `None` means one image row.
    #[serde(default)]
    pub pixels_per_step: Option<usize>,
    #[serde(default = "default_blur_kernel")]
    pub blur_kernel: usize,
    #[serde(default = "default_blur_sigma")]
    pub blur_sigma: f64,
    /// Value written into deleted pixels.
    #[serde(default)]
    pub deletion_fill: f64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self { pixels_per_step: None, blur_kernel: default_blur_kernel(), blur_sigma: default_blur_sigma(), deletion_fill: 0.0 }
    }
}

impl CurveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pixels_per_step == Some(0) {
            return Err(Error::Config("metrics.curves.pixels_per_step must be at least 1".into()));
        }
        if self.blur_kernel % 2 == 0 {
            return Err(Error::Config("metrics.curves.blur_kernel must be odd".into()));
        }
        if !(self.blur_sigma > 0.0) || !self.blur_sigma.is_finite() {
            return Err(Error::Config("metrics.curves.blur_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// `M = x ∘ S`, the saliency broadcast over channels.
pub fn masked_image(pixels: &[f64], shape: [usize; 3], saliency: &[f64]) -> Result<Vec<f64>> {
    let plane = shape[1] * shape[2];
    if saliency.len() != plane || pixels.len() != shape[0] * plane {
        return Err(arg_err(
            "masked_image",
            format!("image of {} values and map of {} do not fit {shape:?}", pixels.len(), saliency.len()),
        ));
    }
    Ok(pixels.iter().enumerate().map(|(i, v)| v * saliency[i % plane]).collect())
}

/// Separable Gaussian blur of each channel with edge clamping.
pub fn gaussian_blur(pixels: &[f64], shape: [usize; 3], kernel: usize, sigma: f64) -> Vec<f64> {
    let [c, h, w] = shape;
    let r = (kernel / 2) as isize;
    let mut taps: Vec<f64> = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; pixels.len()];
    let mut out = vec![0.0; pixels.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] =
                    taps.iter().enumerate().map(|(t, k)| k * pixels[base + y * w + clamp(x as isize + t as isize - r, w)]).sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] =
                    taps.iter().enumerate().map(|(t, k)| k * tmp[base + clamp(y as isize + t as isize - r, h) * w + x]).sum();
            }
        }
    }
    out
}

/// Pixel indices by descending saliency; ties keep the lower index first.
pub fn saliency_order(saliency: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..saliency.len()).collect();
    idx.sort_by(|&a, &b| saliency[b].partial_cmp(&saliency[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

/// Trapezoid area under `(x, y)`.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) / 2.0).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CausalCurves {
    /// Fraction of pixels revealed (insertion) or removed (deletion).
    pub fractions: Vec<f64>,
    /// `p_step / p_original` for the insertion sequence.
    pub insertion: Vec<f64>,
    pub deletion: Vec<f64>,
    /// Area under each curve, ×100.
    pub insertion_auc: f64,
    pub deletion_auc: f64,
}

/// Insertion (reveal from a blurred copy) and deletion (fill) curves for
/// `class`, following the saliency ranking.
pub fn causal_curves<C: Classifier + ?Sized>(
    classifier: &C,
    pixels: &[f64],
    saliency: &[f64],
    class: usize,
    cfg: &CurveConfig,
) -> Result<CausalCurves> {
    cfg.validate()?;
    let shape = classifier.image_shape();
    let [c, h, w] = shape;
    let plane = h * w;
    if saliency.len() != plane || pixels.len() != c * plane {
        return Err(arg_err("causal_curves", "image and saliency map sizes do not match the classifier"));
    }
    let p0 = *classifier
        .probabilities(pixels)?
        .get(class)
        .ok_or_else(|| arg_err("causal_curves", format!("class {class} out of range")))?;
    if !(p0 > 0.0) {
        return Err(Error::Metrics(format!("original probability of class {class} is {p0}")));
    }
    let step = cfg.pixels_per_step.unwrap_or(h);
    let steps = plane.div_ceil(step);
    let order = saliency_order(saliency);
    let mut ins = gaussian_blur(pixels, shape, cfg.blur_kernel, cfg.blur_sigma);
    let mut del = pixels.to_vec();
    let mut ins_imgs = Vec::with_capacity(steps + 1);
    let mut del_imgs = Vec::with_capacity(steps + 1);
    let mut fractions = Vec::with_capacity(steps + 1);
    for s in 0..=steps {
        if s > 0 {
            for &p in &order[(s - 1) * step..(s * step).min(plane)] {
                for ch in 0..c {
                    ins[ch * plane + p] = pixels[ch * plane + p];
                    del[ch * plane + p] = cfg.deletion_fill;
                }
            }
        }
        fractions.push((s * step).min(plane) as f64 / plane as f64);
        ins_imgs.push(ins.clone());
        del_imgs.push(del.clone());
    }
    let ratio = |imgs: &[Vec<f64>]| -> Result<Vec<f64>> {
        Ok(classifier.probabilities_batch(imgs)?.iter().map(|p| p[class] / p0).collect())
    };
    let insertion = ratio(&ins_imgs)?;
    let deletion = ratio(&del_imgs)?;
    Ok(CausalCurves {
        insertion_auc: 100.0 * trapezoid(&fractions, &insertion),
        deletion_auc: 100.0 * trapezoid(&fractions, &deletion),
        fractions,
        insertion,
        deletion,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Faithfulness {
    pub ad: f64,
    pub ag: f64,
    pub ai: f64,
}

/// AD / AG / AI from `(p, o)` pairs: the probability of the explained class on
/// the original image and on its saliency-masked copy.
pub fn faithfulness_scores(pairs: &[(f64, f64)]) -> Result<Faithfulness> {
    if pairs.is_empty() {
        return Err(Error::Metrics("no images to score".into()));
    }
    let (mut ad, mut ag, mut ai) = (0.0, 0.0, 0.0);
    for (i, &(p, o)) in pairs.iter().enumerate() {
        if !(p > 0.0) {
            return Err(Error::Metrics(format!("image {i}: original class probability is {p}")));
        }
        ad += (p - o).max(0.0) / p;
        ag += (o - p).max(0.0) / p;
        if p < o {
            ai += 1.0;
        }
    }
    let k = 100.0 / pairs.len() as f64;
    Ok(Faithfulness { ad: k * ad, ag: k * ag, ai: k * ai })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageRecord {
    pub index: usize,
    pub class: usize,
    pub p: f64,
    pub o: f64,
    pub insertion: Option<f64>,
    pub deletion: Option<f64>,
}

/// Scores one image given its saliency map. `p` comes from `probs`, the
/// classifier's output on the original image.
pub fn score_image<C: Classifier + ?Sized>(
    classifier: &C,
    index: usize,
    pixels: &[f64],
    probs: &[f64],
    saliency: &[f64],
    class: usize,
    curves: Option<&CurveConfig>,
) -> Result<ImageRecord> {
    let p = probs[class];
    if !(p > 0.0) {
        return Err(Error::Metrics(format!("image {index}: original class probability is {p}")));
    }
    let masked = masked_image(pixels, classifier.image_shape(), saliency)?;
    let o = classifier.probabilities(&masked)?[class];
    let (insertion, deletion) = match curves {
        Some(cfg) => {
            let cc = causal_curves(classifier, pixels, saliency, class, cfg)?;
            (Some(cc.insertion_auc), Some(cc.deletion_auc))
        }
        None => (None, None),
    };
    Ok(ImageRecord { index, class, p, o, insertion, deletion })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub class_policy: ClassPolicy,
    pub n: usize,
    pub scores: Faithfulness,
    pub insertion: Option<f64>,
    pub deletion: Option<f64>,
    pub records: Vec<ImageRecord>,
}

impl MetricsReport {
    pub const HEADER: &'static str = "method,class_policy,n,ad,ag,ai,insertion,deletion";

    pub fn from_records(method: &str, class_policy: ClassPolicy, records: Vec<ImageRecord>) -> Result<Self> {
        let pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.p, r.o)).collect();
        let scores = faithfulness_scores(&pairs)?;
        let mean = |f: fn(&ImageRecord) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = records.iter().map(f).collect();
            v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        Ok(Self {
            method: method.to_string(),
            class_policy,
            n: records.len(),
            scores,
            insertion: mean(|r| r.insertion),
            deletion: mean(|r| r.deletion),
            records,
        })
    }
}

pub fn write_metrics_csv<W: Write>(reports: &[MetricsReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MetricsReport::HEADER.split(','))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        w.write_record([
            r.method.clone(),
            r.class_policy.as_str().to_string(),
            r.n.to_string(),
            r.scores.ad.to_string(),
            r.scores.ag.to_string(),
            r.scores.ai.to_string(),
            opt(r.insertion),
            opt(r.deletion),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_metrics_csv(reports: &[MetricsReport], path: &Path) -> Result<()> {
    write_metrics_csv(reports, std::fs::File::create(path)?)
}

/// Explains and scores every image of `dataset` with `method`. Images are
/// processed independently (in parallel when enabled) and reduced in order.
pub fn evaluate_method(
    model: &Model,
    dataset: &Dataset,
    method: CamMethod,
    layer: &str,
    policy: ClassPolicy,
    curves: Option<&CurveConfig>,
    exec: Execution,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::Metrics("dataset is empty".into()));
    }
    if let Some(c) = curves {
        c.validate()?;
    }
    let explainer = Explainer::new(model, method, layer)?;
    let clf = PixelModel { model, stats: &dataset.stats };
    let records = map_indexed(dataset.len(), exec, |i| {
        let img = &dataset.images[i];
        let probs = clf.probabilities(&img.pixels)?;
        let class = match policy {
            ClassPolicy::Predicted => argmax(&probs),
            ClassPolicy::GroundTruth => img.label,
        };
        let map = explainer.explain(&dataset.input(i), class)?;
        score_image(&clf, i, &img.pixels, &probs, &map.normalized, class, curves)
    });
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;
    MetricsReport::from_records(method.as_str(), policy, records)
}

/// AD / AG / AI only.
pub fn faithfulness(model: &Model, dataset: &Dataset, method: CamMethod, policy: ClassPolicy, exec: Execution) -> Result<Faithfulness> {
    Ok(evaluate_method(model, dataset, method, crate::nn::LAST_CONV, policy, None, exec)?.scores)
}
