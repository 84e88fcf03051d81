//! Class activation maps: channel weights from five methods, composition
//! into an upsampled and normalized map, and input-gradient maps.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::loss::{classification_loss, one_hot};
use crate::nn::{Model, LAST_CONV};
use crate::tensor::{backward, BackwardOptions, GradMode, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CamMethod {
    #[serde(rename = "gradcam")]
    GradCam,
    #[serde(rename = "gradcam_pp")]
    GradCamPlusPlus,
    #[serde(rename = "scorecam")]
    ScoreCam,
    #[serde(rename = "ablationcam")]
    AblationCam,
    #[serde(rename = "axiomcam")]
    AxiomCam,
}

impl CamMethod {
    pub const ALL: [CamMethod; 5] =
        [CamMethod::GradCam, CamMethod::GradCamPlusPlus, CamMethod::ScoreCam, CamMethod::AblationCam, CamMethod::AxiomCam];

    pub fn as_str(self) -> &'static str {
        match self {
            CamMethod::GradCam => "gradcam",
            CamMethod::GradCamPlusPlus => "gradcam_pp",
            CamMethod::ScoreCam => "scorecam",
            CamMethod::AblationCam => "ablationcam",
            CamMethod::AxiomCam => "axiomcam",
        }
    }

    fn needs_gradient(self) -> bool {
        matches!(self, CamMethod::GradCam | CamMethod::GradCamPlusPlus | CamMethod::AxiomCam)
    }
}

impl fmt::Display for CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CamMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CamMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown saliency method `{s}`")))
    }
}

/// Activations `A` of the probed layer for one image, and `∂y^c/∂A` when
/// the method needs it. `y^c` is the pre-softmax logit.
#[derive(Clone, Debug)]
pub struct FeatureProbe {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub activations: Vec<f64>,
    pub gradients: Option<Vec<f64>>,
    pub logit: f64,
}

impl FeatureProbe {
    fn plane(&self) -> usize {
        self.height * self.width
    }

    fn channel<'a>(&self, v: &'a [f64], k: usize) -> &'a [f64] {
        &v[k * self.plane()..(k + 1) * self.plane()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub method: String,
    pub class: usize,
    /// `ReLU(Σ αₖ Aᵏ)` at feature resolution.
    pub raw: Vec<f64>,
    pub raw_hw: (usize, usize),
    pub upsampled: Vec<f64>,
    /// Min-max normalized `upsampled`; all zeros when it is constant.
    pub normalized: Vec<f64>,
    pub hw: (usize, usize),
}

/// Bilinear resize with corner alignment.
pub fn bilinear_upsample(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        if n_out <= 1 || n_in <= 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, oh, h);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, ow, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[y * ow + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// `(v − min) / (max − min)`; a constant input maps to all zeros.
pub fn min_max_normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) || !span.is_finite() {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / span).collect()
}

/// `ReLU(Σₖ αₖ Aᵏ)`, upsampled to `out_hw` and normalized.
pub fn compose_saliency(
    weights: &[f64],
    probe: &FeatureProbe,
    out_hw: (usize, usize),
    method: &str,
    class: usize,
) -> Result<SaliencyMap> {
    if weights.len() != probe.channels {
        return Err(arg_err("compose_saliency", format!("{} weights for {} channels", weights.len(), probe.channels)));
    }
    let mut raw = vec![0.0; probe.plane()];
    for (k, &a) in weights.iter().enumerate() {
        for (r, &v) in raw.iter_mut().zip(probe.channel(&probe.activations, k)) {
            *r += a * v;
        }
    }
    for r in &mut raw {
        *r = r.max(0.0);
    }
    let upsampled = bilinear_upsample(&raw, probe.height, probe.width, out_hw.0, out_hw.1);
    let normalized = min_max_normalize(&upsampled);
    Ok(SaliencyMap {
        method: method.to_string(),
        class,
        raw,
        raw_hw: (probe.height, probe.width),
        upsampled,
        normalized,
        hw: out_hw,
    })
}

/// Computes CAM weights for one model, method and layer. Score-CAM's
/// black-image baseline is evaluated once when the explainer is built.
pub struct Explainer<'m> {
    model: &'m Model,
    method: CamMethod,
    layer: String,
    baseline: Option<Vec<f64>>,
}

impl<'m> Explainer<'m> {
    pub fn new(model: &'m Model, method: CamMethod, layer: &str) -> Result<Self> {
        if layer != LAST_CONV && !model.feature_shapes().contains_key(layer) {
            return Err(Error::Model(format!("model has no feature layer `{layer}`")));
        }
        let baseline = if method == CamMethod::ScoreCam {
            let [c, h, w] = model.input_shape();
            Some(model.forward(&Tensor::zeros(&[1, c, h, w]))?.probabilities.to_vec())
        } else {
            None
        };
        Ok(Self { model, method, layer: layer.to_string(), baseline })
    }

    pub fn method(&self) -> CamMethod {
        self.method
    }

    fn input(&self, x: &[f64]) -> Result<Tensor> {
        let [c, h, w] = self.model.input_shape();
        Tensor::new(vec![1, c, h, w], x.to_vec())
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.model.classes() {
            return Err(arg_err("saliency", format!("class {class} out of range for {} classes", self.model.classes())));
        }
        Ok(())
    }

    /// One forward pass exposing the layer's activations, plus one backward
    /// pass for gradient-based methods.
    pub fn probe(&self, x: &[f64], class: usize) -> Result<FeatureProbe> {
        self.check_class(class)?;
        let xt = self.input(x)?;
        let tape = Tape::new();
        let captured = RefCell::new(None);
        let capture = |a: &Tensor| -> Result<Tensor> {
            let leaf = tape.leaf(a);
            *captured.borrow_mut() = Some(leaf.clone());
            Ok(leaf)
        };
        let grads_needed = self.method.needs_gradient();
        let params = self.model.constants();
        let out = if grads_needed {
            self.model.forward_with(&xt, &params, Some((&self.layer, &capture)))?
        } else {
            self.model.forward_with(&xt, &params, None)?
        };
        let a = if grads_needed {
            captured.borrow().clone().ok_or_else(|| Error::Model(format!("layer `{}` was not reached", self.layer)))?
        } else {
            out.feature_maps[&self.layer].clone()
        };
        let logit = out.logits.data()[class];
        let gradients = if grads_needed {
            let y = out.logits.mul(&one_hot(&[class], self.model.classes())?)?.sum()?;
            Some(backward(&y, &[&a], BackwardOptions::standard())?.remove(0).to_vec())
        } else {
            None
        };
        let (channels, height, width) = (a.shape()[1], a.shape()[2], a.shape()[3]);
        Ok(FeatureProbe { channels, height, width, activations: a.to_vec(), gradients, logit })
    }

    /// Channel weights `αₖ` for `class`.
    pub fn weights(&self, x: &[f64], class: usize, probe: &FeatureProbe) -> Result<Vec<f64>> {
        let k = probe.channels;
        let grad = |kk: usize| probe.channel(probe.gradients.as_deref().expect("gradient probe"), kk);
        let act = |kk: usize| probe.channel(&probe.activations, kk);
        Ok(match self.method {
            CamMethod::GradCam => (0..k).map(|c| grad(c).iter().sum::<f64>() / probe.plane() as f64).collect(),
            CamMethod::GradCamPlusPlus => (0..k)
                .map(|c| {
                    let sum_a: f64 = act(c).iter().sum();
                    grad(c)
                        .iter()
                        .map(|&g| {
                            let g2 = g * g;
                            let den = 2.0 * g2 + sum_a * g2 * g;
                            let w = if den == 0.0 { 0.0 } else { g2 / den };
                            w * g.max(0.0)
                        })
                        .sum()
                })
                .collect(),
            CamMethod::AxiomCam => (0..k)
                .map(|c| {
                    let sum_a: f64 = act(c).iter().sum();
                    let num: f64 = act(c).iter().zip(grad(c)).map(|(a, g)| a * g).sum();
                    if sum_a == 0.0 {
                        0.0
                    } else {
                        num / sum_a
                    }
                })
                .collect(),
            CamMethod::ScoreCam => {
                let base = self.baseline.as_ref().expect("score-cam baseline")[class];
                let [ch, h, w] = self.model.input_shape();
                let plane = h * w;
                let mut out = Vec::with_capacity(k);
                for c in 0..k {
                    let mask = min_max_normalize(&bilinear_upsample(act(c), probe.height, probe.width, h, w));
                    let masked: Vec<f64> = (0..ch * plane).map(|i| x[i] * mask[i % plane]).collect();
                    let p = self.model.forward(&self.input(&masked)?)?.probabilities.data()[class];
                    out.push(p - base);
                }
                out
            }
            CamMethod::AblationCam => {
                let params = self.model.constants();
                let mut out = Vec::with_capacity(k);
                for c in 0..k {
                    let plane = probe.plane();
                    let zero = |a: &Tensor| -> Result<Tensor> {
                        let mut v = a.to_vec();
                        v[c * plane..(c + 1) * plane].iter_mut().for_each(|e| *e = 0.0);
                        Tensor::new(a.shape().to_vec(), v)
                    };
                    let y = self.model.forward_with(&self.input(x)?, &params, Some((&self.layer, &zero)))?.logits.data()
                        [class];
                    out.push(if probe.logit == 0.0 { 0.0 } else { (probe.logit - y) / probe.logit });
                }
                out
            }
        })
    }

    /// Saliency map of normalized input `x` for `class`.
    pub fn explain(&self, x: &[f64], class: usize) -> Result<SaliencyMap> {
        let probe = self.probe(x, class)?;
        let weights = self.weights(x, class, &probe)?;
        let [_, h, w] = self.model.input_shape();
        compose_saliency(&weights, &probe, (h, w), self.method.as_str(), class)
    }
}

/// CAM weights of `method` at `layer` for a normalized input `x`.
pub fn cam_weights(method: CamMethod, model: &Model, x: &[f64], class: usize, layer: &str) -> Result<Vec<f64>> {
    let e = Explainer::new(model, method, layer)?;
    let probe = e.probe(x, class)?;
    e.weights(x, class, &probe)
}

/// Classic CAM weights: row `class` of the final linear layer.
pub fn classifier_cam_weights(model: &Model, class: usize) -> Result<Vec<f64>> {
    let w = model.classifier_weights();
    let k = w.shape[1];
    if class >= w.shape[0] {
        return Err(arg_err("saliency", format!("class {class} out of range for {} classes", w.shape[0])));
    }
    Ok(w.data[class * k..(class + 1) * k].to_vec())
}

/// `max_c |∂L_C/∂x|` per pixel (standard or guided), min-max normalized.
pub fn input_gradient_map(model: &Model, x: &[f64], target: usize, mode: GradMode) -> Result<Vec<f64>> {
    let [c, h, w] = model.input_shape();
    let xt = Tensor::new(vec![1, c, h, w], x.to_vec())?;
    let tape = Tape::new();
    let xl = tape.leaf(&xt);
    let lc = classification_loss(model, &model.constants(), &xl, &[target])?;
    let g = backward(&lc, &[&xl], BackwardOptions { mode, create_graph: false })?.remove(0);
    let plane = h * w;
    let per_pixel: Vec<f64> =
        (0..plane).map(|i| (0..c).map(|ch| g.data()[ch * plane + i].abs()).fold(0.0, f64::max)).collect();
    Ok(min_max_normalize(&per_pixel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, ArchitectureSpec};

    fn model() -> Model {
        build_model(&ArchitectureSpec::tinycnn([3, 16, 16], 4), 5).unwrap()
    }

    fn image(seed: f64) -> Vec<f64> {
        (0..768).map(|i| ((i as f64) * 0.37 + seed).sin()).collect()
    }

    #[test]
    fn upsample_corners_and_constant() {
        let src = [0.0, 1.0, 2.0, 3.0];
        let up = bilinear_upsample(&src, 2, 2, 3, 3);
        assert_eq!(up, vec![0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0]);
        assert_eq!(bilinear_upsample(&[4.0], 1, 1, 2, 2), vec![4.0; 4]);
        assert_eq!(min_max_normalize(&[2.0, 2.0]), vec![0.0, 0.0]);
        assert_eq!(min_max_normalize(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn maps_are_normalized() {
        let m = model();
        for method in CamMethod::ALL {
            let e = Explainer::new(&m, method, LAST_CONV).unwrap();
            let s = e.explain(&image(0.3), 1).unwrap();
            assert_eq!(s.normalized.len(), 256);
            assert_eq!(s.raw.len(), 16);
            let hi = s.normalized.iter().cloned().fold(0.0, f64::max);
            let lo = s.normalized.iter().cloned().fold(1.0, f64::min);
            assert!(s.normalized.iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(hi == 0.0 || (hi == 1.0 && lo == 0.0), "{method}");
            assert!(s.raw.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gradcam_reduces_to_cam_for_gap_linear() {
        let m = model();
        let x = image(1.1);
        for class in 0..4 {
            let g = cam_weights(CamMethod::GradCam, &m, &x, class, LAST_CONV).unwrap();
            let probe = FeatureProbe { gradients: None, ..Explainer::new(&m, CamMethod::GradCam, LAST_CONV).unwrap().probe(&x, class).unwrap() };
            let w = classifier_cam_weights(&m, class).unwrap();
            let plane = probe.plane() as f64;
            for (a, b) in g.iter().zip(&w) {
                assert!((a - b / plane).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn scorecam_forward_count() {
        let m = model();
        let e = Explainer::new(&m, CamMethod::ScoreCam, LAST_CONV).unwrap();
        let before = m.forward_count();
        let probe = e.probe(&image(0.0), 2).unwrap();
        let mid = m.forward_count();
        e.weights(&image(0.0), 2, &probe).unwrap();
        assert_eq!(m.forward_count() - mid, probe.channels);
        assert_eq!(mid - before, 1);
    }

    #[test]
    fn constant_activation_scores_zero() {
        let m = model();
        let e = Explainer::new(&m, CamMethod::ScoreCam, LAST_CONV).unwrap();
        let probe = FeatureProbe {
            channels: 16,
            height: 4,
            width: 4,
            activations: vec![0.7; 256],
            gradients: None,
            logit: 1.0,
        };
        let w = e.weights(&image(0.2), 0, &probe).unwrap();
        assert!(w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_ratio_guards() {
        let m = model();
        let x = image(0.5);
        let probe = FeatureProbe {
            channels: 16,
            height: 4,
            width: 4,
            activations: vec![0.0; 256],
            gradients: Some(vec![0.0; 256]),
            logit: 2.0,
        };
        for method in [CamMethod::GradCamPlusPlus, CamMethod::AxiomCam] {
            let e = Explainer::new(&m, method, LAST_CONV).unwrap();
            assert!(e.weights(&x, 0, &probe).unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn unknown_layer_and_class() {
        let m = model();
        assert!(Explainer::new(&m, CamMethod::GradCam, "nope").is_err());
        assert!(Explainer::new(&m, CamMethod::GradCam, "conv1").is_ok());
        let e = Explainer::new(&m, CamMethod::GradCam, LAST_CONV).unwrap();
        assert!(e.explain(&image(0.0), 4).is_err());
        assert!("gradcam_pp".parse::<CamMethod>().unwrap() == CamMethod::GradCamPlusPlus);
    }

    #[test]
    fn gradient_maps_normalized() {
        let m = model();
        for mode in [GradMode::Standard, GradMode::Guided] {
            let g = input_gradient_map(&m, &image(0.9), 3, mode).unwrap();
            assert_eq!(g.len(), 256);
            assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
