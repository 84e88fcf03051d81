//! Classification loss, gradient error functions and the interpretable loss
//! `L = L_C + λ·L_R`, where `L_R` compares each example's standard input
//! gradient with its (detached) guided input gradient.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::nn::Model;
use crate::tensor::{backward, BackwardOptions, GradMode, Tensor};

/// Default regularization weight for the Cosine error function.
pub const DEFAULT_LAMBDA: f64 = 7.5e-3;

/// Norms below this make Cosine / histogram intersection undefined.
pub const NORM_GUARD: f64 = 1e-12;

/// How two gradient images are compared. Similarities carry a negative sign
/// so every variant is minimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorFnKind {
    Mae,
    Mse,
    Cosine,
    HistogramIntersection,
}

impl ErrorFnKind {
    pub const ALL: [ErrorFnKind; 4] =
        [ErrorFnKind::Mae, ErrorFnKind::Mse, ErrorFnKind::Cosine, ErrorFnKind::HistogramIntersection];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorFnKind::Mae => "mae",
            ErrorFnKind::Mse => "mse",
            ErrorFnKind::Cosine => "cosine",
            ErrorFnKind::HistogramIntersection => "histogram_intersection",
        }
    }
}

impl fmt::Display for ErrorFnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorFnKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(Self::Mae),
            "mse" => Ok(Self::Mse),
            "cosine" => Ok(Self::Cosine),
            "histogram_intersection" | "hi" => Ok(Self::HistogramIntersection),
            other => Err(Error::Config(format!("unknown error function `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub regularization: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.classification.is_finite() && self.regularization.is_finite() && self.total.is_finite()
    }
}

/// `−ln p[target]` for a probability row.
pub fn cross_entropy(probabilities: &[f64], target: usize) -> Result<f64> {
    if target >= probabilities.len() {
        return Err(arg_err("cross_entropy", format!("target {target} out of range for {} classes", probabilities.len())));
    }
    let total: f64 = probabilities.iter().sum();
    if (total - 1.0).abs() > 1e-9 || probabilities.iter().any(|&p| p < 0.0) {
        return Err(arg_err("cross_entropy", format!("not a probability vector (sum {total})")));
    }
    Ok(-probabilities[target].ln())
}

/// Cross-entropy of `softmax(logits)` against `target`, via log-sum-exp.
pub fn cross_entropy_from_logits(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(arg_err("cross_entropy", format!("target {target} out of range for {} classes", logits.len())));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[target])
}

pub fn one_hot(targets: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; targets.len() * classes];
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(arg_err("cross_entropy", format!("target {t} at index {i} out of range for {classes} classes")));
        }
        data[i * classes + t] = 1.0;
    }
    Tensor::new(vec![targets.len(), classes], data)
}

/// Mean cross-entropy of a `[n, classes]` logit batch.
pub fn classification_loss_from_logits(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let (n, c) = match logits.shape() {
        [n, c] => (*n, *c),
        s => return Err(Error::Shape { op: "classification_loss", detail: format!("logits must be 2-D, got {s:?}") }),
    };
    if n == 0 {
        return Err(arg_err("classification_loss", "empty batch"));
    }
    if targets.len() != n {
        return Err(arg_err("classification_loss", format!("{n} logit rows but {} targets", targets.len())));
    }
    let picked = logits.log_softmax()?.mul(&one_hot(targets, c)?)?.sum()?;
    picked.scale(-1.0 / n as f64)
}

/// `L_C = (1/n) Σ CE(f(xᵢ; θ), tᵢ)`.
pub fn classification_loss(model: &Model, params: &[Tensor], x: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let out = model.forward_with(x, params, None)?;
    classification_loss_from_logits(&out.logits, targets)
}

fn check_pair(d: &Tensor, t: &Tensor) -> Result<()> {
    if d.shape() != t.shape() {
        return Err(Error::Shape { op: "error_fn", detail: format!("{:?} vs {:?}", d.shape(), t.shape()) });
    }
    if d.numel() == 0 {
        return Err(arg_err("error_fn", "empty gradient images"));
    }
    Ok(())
}

/// `E(δ, δ')` over whole tensors, differentiable in both arguments.
///
/// Cosine and histogram intersection fail on zero-norm inputs.
pub fn error_fn(kind: ErrorFnKind, delta: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    check_pair(delta, teacher)?;
    let m = delta.numel();
    let d = delta.reshape(&[1, m])?;
    let t = teacher.reshape(&[1, m])?;
    let l2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let l1 = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>();
    let norms = match kind {
        ErrorFnKind::Cosine => Some((l2(d.data()), l2(t.data()))),
        ErrorFnKind::HistogramIntersection => Some((l1(d.data()), l1(t.data()))),
        _ => None,
    };
    if let Some((a, b)) = norms {
        if a < NORM_GUARD || b < NORM_GUARD {
            return Err(arg_err("error_fn", format!("{kind} is undefined for a zero-norm gradient")));
        }
    }
    error_rows(kind, &d, &t)?.reshape(&[])
}

/// Per-row `E` for `[n, m]` gradient images. Rows where Cosine / histogram
/// intersection is undefined (a norm below [`NORM_GUARD`]) contribute exactly 0
/// and no gradient.
pub fn error_rows(kind: ErrorFnKind, delta: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    check_pair(delta, teacher)?;
    let (n, m) = match delta.shape() {
        [n, m] => (*n, *m),
        s => return Err(Error::Shape { op: "error_fn", detail: format!("expected [n, m], got {s:?}") }),
    };
    let rows = |t: &Tensor| t.sum_last().and_then(|s| s.reshape(&[n]));
    match kind {
        ErrorFnKind::Mae => rows(&delta.sub(teacher)?.abs()?)?.scale(1.0 / m as f64),
        ErrorFnKind::Mse => {
            let diff = delta.sub(teacher)?;
            rows(&diff.mul(&diff)?)?.scale(1.0 / m as f64)
        }
        ErrorFnKind::Cosine | ErrorFnKind::HistogramIntersection => {
            let (num, dd, tt) = if kind == ErrorFnKind::Cosine {
                (rows(&delta.mul(teacher)?)?, rows(&delta.mul(delta)?)?, rows(&teacher.mul(teacher)?)?)
            } else {
                let (da, ta) = (delta.abs()?, teacher.abs()?);
                (rows(&da.minimum(&ta)?)?, rows(&da)?, rows(&ta)?)
            };
            let norm = |v: f64| if kind == ErrorFnKind::Cosine { v.sqrt() } else { v };
            let valid: Vec<f64> = dd
                .data()
                .iter()
                .zip(tt.data())
                .map(|(&a, &b)| if norm(a) >= NORM_GUARD && norm(b) >= NORM_GUARD { 1.0 } else { 0.0 })
                .collect();
            // a constant 1 under the root keeps dead rows finite in both directions
            let dead = Tensor::from_parts(vec![n], Rc::new(valid.iter().map(|v| 1.0 - v).collect()));
            let valid = Tensor::from_parts(vec![n], Rc::new(valid));
            let den = dd.mul(&tt)?;
            let den = if kind == ErrorFnKind::Cosine { den.add(&dead)?.sqrt()? } else { den.add(&dead)? };
            num.div(&den)?.mul(&valid)?.neg()
        }
    }
}

/// Where the guided teacher gradient comes from.
#[derive(Clone, Copy)]
pub enum Teacher<'a> {
    /// Guided backpropagation of `L_C` at the current parameters.
    Guided,
    /// A fixed tensor shaped like the input batch.
    Given(&'a Tensor),
}

pub struct InterpretableLoss {
    pub breakdown: LossBreakdown,
    /// Differentiable `L`.
    pub total: Tensor,
    /// Logits of the forward pass (for running accuracy).
    pub logits: Tensor,
}

/// `L = L_C + λ·(1/n) Σ E(∂L_C/∂xᵢ, ∂_G L_C/∂xᵢ)` with the guided gradient detached.
///
/// `x` must be a tape node. With `λ = 0` the regularizer is skipped and `L`
/// is exactly `L_C`.
pub fn interpretable_loss(
    model: &Model,
    params: &[Tensor],
    x: &Tensor,
    targets: &[usize],
    kind: ErrorFnKind,
    lambda: f64,
) -> Result<InterpretableLoss> {
    interpretable_loss_with(model, params, x, targets, kind, lambda, Teacher::Guided)
}

pub fn interpretable_loss_with(
    model: &Model,
    params: &[Tensor],
    x: &Tensor,
    targets: &[usize],
    kind: ErrorFnKind,
    lambda: f64,
    teacher: Teacher<'_>,
) -> Result<InterpretableLoss> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(arg_err("interpretable_loss", format!("lambda must be finite and >= 0, got {lambda}")));
    }
    if !x.requires_grad() {
        return Err(arg_err("interpretable_loss", "input batch must be a tape node"));
    }
    let out = model.forward_with(x, params, None)?;
    let lc = classification_loss_from_logits(&out.logits, targets)?;
    let classification = lc.item();
    if lambda == 0.0 {
        let breakdown = LossBreakdown { classification, regularization: 0.0, total: classification, lambda };
        return Ok(InterpretableLoss { breakdown, total: lc, logits: out.logits });
    }
    let n = x.shape()[0];
    let m = x.numel() / n;
    let guided = match teacher {
        Teacher::Guided => backward(&lc, &[x], BackwardOptions { mode: GradMode::Guided, create_graph: false })?
            .remove(0),
        Teacher::Given(t) => {
            if t.shape() != x.shape() {
                return Err(Error::Shape { op: "interpretable_loss", detail: format!("teacher {:?} vs input {:?}", t.shape(), x.shape()) });
            }
            t.detach()
        }
    };
    let standard = backward(&lc, &[x], BackwardOptions::create_graph())?.remove(0);
    let e = error_rows(kind, &standard.reshape(&[n, m])?, &guided.reshape(&[n, m])?)?;
    let lr = e.mean()?;
    let total = lc.add(&lr.scale(lambda)?)?;
    let breakdown = LossBreakdown { classification, regularization: lr.item(), total: total.item(), lambda };
    Ok(InterpretableLoss { breakdown, total, logits: out.logits })
}

/// Standard or guided `∂L_C/∂x` for a batch (constant result).
pub fn input_gradient(model: &Model, x: &Tensor, targets: &[usize], mode: GradMode) -> Result<Tensor> {
    let tape = crate::tensor::Tape::new();
    let xl = tape.leaf(x);
    let lc = classification_loss(model, &model.constants(), &xl, targets)?;
    Ok(backward(&lc, &[&xl], BackwardOptions { mode, create_graph: false })?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, ArchitectureSpec};
    use crate::tensor::Tape;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec())
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap(), 0.0);
        assert!((cross_entropy(&[0.25; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-15);
        let ce = cross_entropy_from_logits(&[2.0, 0.0], 0).unwrap();
        let direct = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((ce - direct).abs() < 1e-15);
        assert!((ce - 0.126928).abs() < 1e-6);
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
        assert!(cross_entropy(&[0.5, 0.6], 0).is_err());
        assert!(cross_entropy_from_logits(&[0.0], 1).is_err());
    }

    #[test]
    fn batch_loss_is_mean() {
        let logits = Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let l = classification_loss_from_logits(&logits, &[0, 0]).unwrap().item();
        let a = cross_entropy_from_logits(&[2.0, 0.0], 0).unwrap();
        let b = cross_entropy_from_logits(&[0.0, 1.0], 0).unwrap();
        assert!((l - (a + b) / 2.0).abs() < 1e-15);
        let dup = Tensor::new(vec![2, 2], vec![2.0, 0.0, 2.0, 0.0]).unwrap();
        let one = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
        let ld = classification_loss_from_logits(&dup, &[0, 0]).unwrap().item();
        let l1 = classification_loss_from_logits(&one, &[0]).unwrap().item();
        assert!((ld - l1).abs() < 1e-15);
        assert!(classification_loss_from_logits(&Tensor::zeros(&[0, 2]), &[]).is_err());
        assert!(classification_loss_from_logits(&one, &[2]).is_err());
    }

    #[test]
    fn error_identity_cases() {
        let d = v(&[0.3, -1.2, 2.5, 0.0]);
        assert_eq!(error_fn(ErrorFnKind::Mae, &d, &d).unwrap().item(), 0.0);
        assert_eq!(error_fn(ErrorFnKind::Mse, &d, &d).unwrap().item(), 0.0);
        assert_eq!(error_fn(ErrorFnKind::Cosine, &d, &d).unwrap().item(), -1.0);
        assert_eq!(error_fn(ErrorFnKind::Cosine, &v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap().item(), 0.0);
        assert_eq!(error_fn(ErrorFnKind::Cosine, &d, &d.neg().unwrap()).unwrap().item(), 1.0);
        let h = v(&[0.5, 0.5]);
        assert_eq!(error_fn(ErrorFnKind::HistogramIntersection, &h, &h).unwrap().item(), -1.0);
    }

    #[test]
    fn mae_mse_values() {
        let a = v(&[1.0, 2.0]);
        let b = v(&[0.0, 4.0]);
        assert_eq!(error_fn(ErrorFnKind::Mae, &a, &b).unwrap().item(), 1.5);
        assert_eq!(error_fn(ErrorFnKind::Mse, &a, &b).unwrap().item(), 2.5);
    }

    #[test]
    fn zero_norm_errors_and_guards() {
        let z = v(&[0.0, 0.0]);
        let a = v(&[1.0, 2.0]);
        assert!(error_fn(ErrorFnKind::Cosine, &z, &a).is_err());
        assert!(error_fn(ErrorFnKind::HistogramIntersection, &a, &z).is_err());
        assert!(error_fn(ErrorFnKind::Mae, &z, &a).is_ok());
        // guarded batch form: dead row contributes 0 and no gradient
        let tape = Tape::new();
        let d = tape.leaf(&Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 2.0]).unwrap());
        let t = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 2.0]).unwrap();
        for kind in [ErrorFnKind::Cosine, ErrorFnKind::HistogramIntersection] {
            let e = error_rows(kind, &d, &t).unwrap();
            assert_eq!(e.data()[0], 0.0);
            let expect = if kind == ErrorFnKind::Cosine { -1.0 } else { -3.0 / 9.0 };
            assert_eq!(e.data()[1], expect);
            let g = backward(&e.sum().unwrap(), &[&d], BackwardOptions::standard()).unwrap();
            assert_eq!(&g[0].data()[..2], &[0.0, 0.0]);
            assert!(g[0].data().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn lambda_zero_is_plain_classification() {
        let m = build_model(&ArchitectureSpec::tinycnn([3, 8, 8], 3), 3).unwrap();
        let x = Tensor::new(vec![2, 3, 8, 8], (0..384).map(|i| (i as f64 * 0.05).cos()).collect()).unwrap();
        let t = [0, 2];
        let tape = Tape::new();
        let p = m.bind(&tape);
        let xl = tape.leaf(&x);
        let il = interpretable_loss(&m, &p, &xl, &t, ErrorFnKind::Cosine, 0.0).unwrap();
        let pr: Vec<&Tensor> = p.iter().collect();
        let g1 = backward(&il.total, &pr, BackwardOptions::standard()).unwrap();
        let tape2 = Tape::new();
        let p2 = m.bind(&tape2);
        let lc = classification_loss(&m, &p2, &x, &t).unwrap();
        let pr2: Vec<&Tensor> = p2.iter().collect();
        let g2 = backward(&lc, &pr2, BackwardOptions::standard()).unwrap();
        assert_eq!(il.breakdown.total.to_bits(), lc.item().to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn breakdown_is_consistent_and_input_must_be_node() {
        let m = build_model(&ArchitectureSpec::tinycnn([3, 8, 8], 3), 3).unwrap();
        let x = Tensor::new(vec![2, 3, 8, 8], (0..384).map(|i| (i as f64 * 0.05).sin()).collect()).unwrap();
        let tape = Tape::new();
        let p = m.bind(&tape);
        assert!(interpretable_loss(&m, &p, &x, &[0, 1], ErrorFnKind::Mse, 0.1).is_err());
        let xl = tape.leaf(&x);
        assert!(interpretable_loss(&m, &p, &xl, &[0, 1], ErrorFnKind::Mse, -1.0).is_err());
        let il = interpretable_loss(&m, &p, &xl, &[0, 1], ErrorFnKind::Cosine, DEFAULT_LAMBDA).unwrap();
        let b = il.breakdown;
        assert_eq!(b.total, b.classification + b.lambda * b.regularization);
        assert!(b.regularization >= -1.0 && b.regularization <= 1.0);
        assert!(b.is_finite());
    }

    #[test]
    fn kind_parsing() {
        for k in ErrorFnKind::ALL {
            assert_eq!(k.as_str().parse::<ErrorFnKind>().unwrap(), k);
        }
        assert!("l2".parse::<ErrorFnKind>().is_err());
    }
}
