//! Gradient verification: every primitive's first and second derivatives
//! against central differences, double backpropagation through the full
//! interpretable loss, and the guided rule's sign and locality properties.

use std::rc::Rc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::loss::{interpretable_loss, interpretable_loss_with, one_hot, classification_loss, ErrorFnKind, Teacher, DEFAULT_LAMBDA};
use crate::nn::{build_model, ArchitectureSpec, Model};
use crate::tensor::{
    backward, backward_traced, finite_diff::scaled_error, finite_diff_gradient, forward_primitive, BackwardOptions, GradMode, Op,
    Tape, Tensor,
};

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seeds: u64,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Tolerance for the whole-network double-backprop check.
    pub network_rel_tol: f64,
    pub guided_nets: usize,
    /// Corrupt the backward rule of this op (see [`Tape::inject_fault`]).
    pub fault: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { seeds: 50, step: 1e-6, rel_tol: 1e-4, abs_floor: 1e-7, network_rel_tol: 1e-3, guided_nets: 100, fault: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    /// Worst element error (scaled as in [`scaled_error`], or a count for
    /// the guided checks).
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

type OpFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    f: OpFn,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values with magnitude in `[0.1, 1]` and random sign, away from kinks at 0.
fn signed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.gen_range(0.1..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape.to_vec(), v).expect("shape")
}

/// Distinct values at least 0.04 apart, so a max never ties.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0 + rng.gen_range(0.0..0.01)).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).expect("shape")
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut cases = Vec::new();
    let mut add = |name: &'static str, inputs: Vec<Tensor>, f: OpFn| cases.push(OpCase { name, inputs, f });
    add("add", vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0)], Box::new(|x| x[0].add(&x[1])));
    add("sub", vec![uniform(rng, &[2, 1, 3], -1.0, 1.0), uniform(rng, &[4, 1], -1.0, 1.0)], Box::new(|x| x[0].sub(&x[1])));
    add("mul", vec![uniform(rng, &[2, 3], -1.0, 1.0), uniform(rng, &[2, 1], -1.0, 1.0)], Box::new(|x| x[0].mul(&x[1])));
    add("div", vec![uniform(rng, &[3, 2], -1.0, 1.0), uniform(rng, &[2], 0.5, 2.0)], Box::new(|x| x[0].div(&x[1])));
    let a = uniform(rng, &[2, 3], -1.0, 1.0);
    let b = a.add(&signed(rng, &[2, 3])).expect("shape");
    add("minimum", vec![a, b], Box::new(|x| x[0].minimum(&x[1])));
    add("neg", vec![uniform(rng, &[4], -1.0, 1.0)], Box::new(|x| x[0].neg()));
    add("scale", vec![uniform(rng, &[4], -1.0, 1.0)], Box::new(|x| x[0].scale(1.7)));
    add("abs", vec![signed(rng, &[2, 4])], Box::new(|x| x[0].abs()));
    add("exp", vec![uniform(rng, &[2, 3], -1.0, 1.0)], Box::new(|x| x[0].exp()));
    add("log", vec![uniform(rng, &[2, 3], 0.5, 2.0)], Box::new(|x| x[0].ln()));
    add("sqrt", vec![uniform(rng, &[2, 3], 0.5, 2.0)], Box::new(|x| x[0].sqrt()));
    add("relu", vec![signed(rng, &[4, 5])], Box::new(|x| x[0].relu()));
    add("matmul", vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[4, 2], -1.0, 1.0)], Box::new(|x| x[0].matmul(&x[1])));
    add("transpose", vec![uniform(rng, &[3, 4], -1.0, 1.0)], Box::new(|x| x[0].transpose()));
    add(
        "linear",
        vec![uniform(rng, &[2, 4], -1.0, 1.0), uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[3], -1.0, 1.0)],
        Box::new(|x| x[0].linear(&x[1], &x[2])),
    );
    add(
        "conv2d",
        vec![uniform(rng, &[2, 2, 5, 5], -1.0, 1.0), uniform(rng, &[3, 2, 3, 3], -1.0, 1.0)],
        Box::new(|x| x[0].conv2d(&x[1], 2, 1)),
    );
    add(
        "conv2d",
        vec![uniform(rng, &[1, 2, 4, 4], -1.0, 1.0), uniform(rng, &[2, 2, 2, 2], -1.0, 1.0)],
        Box::new(|x| x[0].conv2d(&x[1], 1, 0)),
    );
    add(
        "conv2d_input_grad",
        vec![uniform(rng, &[2, 3, 3, 3], -1.0, 1.0), uniform(rng, &[3, 2, 3, 3], -1.0, 1.0)],
        Box::new(|x| forward_primitive(Op::Conv2dInputGrad { stride: 2, pad: 1, input_hw: (5, 5) }, &[&x[0], &x[1]])),
    );
    add(
        "conv2d_weight_grad",
        vec![uniform(rng, &[2, 2, 5, 5], -1.0, 1.0), uniform(rng, &[2, 3, 3, 3], -1.0, 1.0)],
        Box::new(|x| forward_primitive(Op::Conv2dWeightGrad { stride: 2, pad: 1, kernel_hw: (3, 3) }, &[&x[0], &x[1]])),
    );
    add("maxpool2d", vec![distinct(rng, &[2, 2, 4, 4])], Box::new(|x| x[0].max_pool2d(2, 2)));
    add("maxpool2d", vec![distinct(rng, &[1, 2, 5, 5])], Box::new(|x| x[0].max_pool2d(3, 2)));
    let index: Rc<Vec<usize>> = Rc::new((0..6).map(|_| rng.gen_range(0..8)).collect());
    let scatter = index.clone();
    add(
        "pool_scatter",
        vec![uniform(rng, &[2, 3], -1.0, 1.0)],
        Box::new(move |x| forward_primitive(Op::PoolScatter { index: scatter.clone(), input_shape: vec![2, 4] }, &[&x[0]])),
    );
    add(
        "pool_gather",
        vec![uniform(rng, &[2, 4], -1.0, 1.0)],
        Box::new(move |x| forward_primitive(Op::PoolGather { index: index.clone(), output_shape: vec![2, 3] }, &[&x[0]])),
    );
    add("global_avg_pool", vec![uniform(rng, &[2, 3, 2, 2], -1.0, 1.0)], Box::new(|x| x[0].global_avg_pool()));
    add("softmax", vec![uniform(rng, &[3, 4], -2.0, 2.0)], Box::new(|x| x[0].softmax()));
    add("log_softmax", vec![uniform(rng, &[3, 4], -2.0, 2.0)], Box::new(|x| x[0].log_softmax()));
    add("sum", vec![uniform(rng, &[2, 3], -1.0, 1.0)], Box::new(|x| x[0].sum()));
    add("mean", vec![uniform(rng, &[2, 3], -1.0, 1.0)], Box::new(|x| x[0].mean()));
    add("sum_last", vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)], Box::new(|x| x[0].sum_last()));
    add("reshape", vec![uniform(rng, &[2, 6], -1.0, 1.0)], Box::new(|x| x[0].reshape(&[3, 4])));
    add("broadcast_to", vec![uniform(rng, &[3, 1], -1.0, 1.0)], Box::new(|x| x[0].broadcast_to(&[2, 3, 4])));
    add("sum_to", vec![uniform(rng, &[2, 3, 4], -1.0, 1.0)], Box::new(|x| x[0].sum_to(&[3, 1])));
    add("pad", vec![uniform(rng, &[1, 2, 3, 3], -1.0, 1.0)], Box::new(|x| x[0].pad2d(1)));
    add("crop", vec![uniform(rng, &[1, 2, 5, 5], -1.0, 1.0)], Box::new(|x| x[0].crop2d(1)));
    // a composite whose second derivative mixes several rules
    add(
        "composite",
        vec![uniform(rng, &[2, 3], 0.5, 1.5), uniform(rng, &[2, 3], -1.0, 1.0)],
        Box::new(|x| x[0].mul(&x[1])?.exp()?.add(&x[0].sqrt()?)?.log_softmax()),
    );
    cases
}

struct Checker<'a> {
    cfg: &'a GradcheckConfig,
}

impl Checker<'_> {
    fn tape(&self) -> Tape {
        let t = Tape::new();
        if let Some(op) = &self.cfg.fault {
            t.inject_fault(op);
        }
        t
    }

    fn worst(&self, analytic: &[f64], numeric: &[f64], rel: f64) -> f64 {
        analytic.iter().zip(numeric).map(|(&a, &n)| scaled_error(a, n, rel, self.cfg.abs_floor)).fold(0.0, f64::max)
    }

    /// `Σ out ∘ r` for a fixed random `r`.
    fn scalarize(out: &Tensor, r: &Tensor) -> Result<Tensor> {
        out.mul(r)?.sum()
    }

    /// `Σᵢ ⟨∂L/∂xᵢ, sᵢ⟩`, the directional quantity whose gradient is a
    /// Hessian-vector product.
    fn grad_dot(&self, case: &OpCase, inputs: &[Tensor], r: &Tensor, s: &[Tensor], create_graph: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let tape = self.tape();
        let leaves: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let l = Self::scalarize(&(case.f)(&leaves)?, r)?;
        let refs: Vec<&Tensor> = leaves.iter().collect();
        let opts = if create_graph { BackwardOptions::create_graph() } else { BackwardOptions::standard() };
        let grads = backward(&l, &refs, opts)?;
        let mut m = Tensor::scalar(0.0);
        for (g, si) in grads.iter().zip(s) {
            m = m.add(&g.mul(si)?.sum()?)?;
        }
        Ok((m, leaves))
    }

    fn op_first_order(&self, case: &OpCase, r: &Tensor) -> Result<f64> {
        let tape = self.tape();
        let leaves: Vec<Tensor> = case.inputs.iter().map(|t| tape.leaf(t)).collect();
        let l = Self::scalarize(&(case.f)(&leaves)?, r)?;
        let refs: Vec<&Tensor> = leaves.iter().collect();
        let grads = backward(&l, &refs, BackwardOptions::standard())?;
        let mut worst: f64 = 0.0;
        for (i, g) in grads.iter().enumerate() {
            let num = finite_diff_gradient(
                |t| {
                    let mut inp = case.inputs.clone();
                    inp[i] = t.clone();
                    Ok(Self::scalarize(&(case.f)(&inp)?, r)?.item())
                },
                &case.inputs[i],
                self.cfg.step,
            )?;
            worst = worst.max(self.worst(g.data(), num.data(), self.cfg.rel_tol));
        }
        Ok(worst)
    }

    fn op_second_order(&self, case: &OpCase, r: &Tensor, s: &[Tensor]) -> Result<f64> {
        let (m, leaves) = self.grad_dot(case, &case.inputs, r, s, true)?;
        let refs: Vec<&Tensor> = leaves.iter().collect();
        let analytic: Vec<Tensor> = if m.requires_grad() {
            backward(&m, &refs, BackwardOptions::standard())?
        } else {
            case.inputs.iter().map(|t| Tensor::zeros(t.shape())).collect()
        };
        let mut worst: f64 = 0.0;
        for (j, a) in analytic.iter().enumerate() {
            let num = finite_diff_gradient(
                |t| {
                    let mut inp = case.inputs.clone();
                    inp[j] = t.clone();
                    Ok(self.grad_dot(case, &inp, r, s, false)?.0.item())
                },
                &case.inputs[j],
                self.cfg.step,
            )?;
            worst = worst.max(self.worst(a.data(), num.data(), self.cfg.rel_tol));
        }
        Ok(worst)
    }

    fn run_ops(&self, checks: &mut Vec<CheckResult>) -> Result<()> {
        let mut first: Vec<(&'static str, usize, f64)> = Vec::new();
        let mut second: Vec<(&'static str, usize, f64)> = Vec::new();
        let bump = |acc: &mut Vec<(&'static str, usize, f64)>, name: &'static str, err: f64| {
            match acc.iter_mut().find(|e| e.0 == name) {
                Some(e) => {
                    e.1 += 1;
                    e.2 = e.2.max(err);
                }
                None => acc.push((name, 1, err)),
            }
        };
        for seed in 0..self.cfg.seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164 ^ seed);
            for case in op_cases(&mut rng) {
                let out = (case.f)(&case.inputs)?;
                let r = uniform(&mut rng, out.shape(), -1.0, 1.0);
                let s: Vec<Tensor> = case.inputs.iter().map(|t| uniform(&mut rng, t.shape(), -1.0, 1.0)).collect();
                let e1 = self.op_first_order(&case, &r)?;
                let e2 = self.op_second_order(&case, &r, &s)?;
                bump(&mut first, case.name, e1);
                bump(&mut second, case.name, e2);
            }
        }
        for (prefix, acc) in [("grad", first), ("hessian", second)] {
            for (name, cases, err) in acc {
                checks.push(CheckResult {
                    name: format!("{prefix}:{name}"),
                    cases,
                    max_error: err,
                    tolerance: self.cfg.rel_tol,
                    passed: err <= self.cfg.rel_tol,
                });
            }
        }
        Ok(())
    }

    /// `∂L/∂θ` of the full loss (double backprop through `∂L_C/∂x`) against
    /// central differences of `L(θ)` with the detached guided teacher held
    /// at its value at the base point.
    fn network(&self, lambda: f64) -> Result<f64> {
        let (model, x, t) = network_fixture()?;
        let tape = self.tape();
        let params = model.bind(&tape);
        let xl = tape.leaf(&x);
        let teacher = {
            let tape = self.tape();
            let p = model.bind(&tape);
            let xl = tape.leaf(&x);
            let lc = classification_loss(&model, &p, &xl, &t)?;
            backward(&lc, &[&xl], BackwardOptions::guided())?.remove(0)
        };
        let il = interpretable_loss(&model, &params, &xl, &t, ErrorFnKind::Cosine, lambda)?;
        let refs: Vec<&Tensor> = params.iter().collect();
        let grads = backward(&il.total, &refs, BackwardOptions::standard())?;
        let base = model.constants();
        let mut worst: f64 = 0.0;
        for (i, g) in grads.iter().enumerate() {
            let num = finite_diff_gradient(
                |probe| {
                    let tape = self.tape();
                    let xl = tape.leaf(&x);
                    let mut p = base.clone();
                    p[i] = probe.clone();
                    let l = interpretable_loss_with(&model, &p, &xl, &t, ErrorFnKind::Cosine, lambda, Teacher::Given(&teacher))?;
                    Ok(l.breakdown.total)
                },
                &base[i],
                self.cfg.step,
            )?;
            worst = worst.max(self.worst(g.data(), num.data(), self.cfg.network_rel_tol));
        }
        Ok(worst)
    }
}

/// A tinycnn (under 2k parameters) with two inputs and targets.
pub fn network_fixture() -> Result<(Model, Tensor, Vec<usize>)> {
    let model = build_model(&ArchitectureSpec::tinycnn([3, 8, 8], 4), 17)?;
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let x = uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
    Ok((model, x, vec![1, 3]))
}

/// Guided emissions at every ReLU are nonnegative on `nets` random networks.
/// Returns the number of negative emissions seen (must be 0) and the number
/// of negative emissions the standard rule produced (shows the check bites).
pub fn guided_sign_check(nets: usize) -> Result<(usize, usize)> {
    let (mut guided_neg, mut standard_neg) = (0, 0);
    for seed in 0..nets as u64 {
        let model = build_model(&ArchitectureSpec::tinycnn([3, 8, 8], 4), 1000 + seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[1, 3, 8, 8], -2.0, 2.0);
        let target = rng.gen_range(0..4);
        for (mode, count) in [(GradMode::Guided, &mut guided_neg), (GradMode::Standard, &mut standard_neg)] {
            let tape = Tape::new();
            let xl = tape.leaf(&x);
            let lc = classification_loss(&model, &model.constants(), &xl, &[target])?;
            let trace = backward_traced(&lc, &[&xl], BackwardOptions { mode, create_graph: false })?;
            *count += trace.relu_emissions.iter().map(|e| e.data().iter().filter(|&&v| v < 0.0).count()).sum::<usize>();
        }
    }
    Ok((guided_neg, standard_neg))
}

/// A network with positive weights, biases and input, differentiated
/// through one logit: every ReLU input is positive and every incoming
/// gradient nonnegative, so guided and standard must agree exactly.
/// Returns the number of differing input-gradient elements.
pub fn guided_locality_check() -> Result<usize> {
    let mut model = build_model(&ArchitectureSpec::tinycnn([3, 8, 8], 4), 5)?;
    for p in model.params_mut() {
        for v in &mut p.data {
            *v = v.abs() + 0.01;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = uniform(&mut rng, &[1, 3, 8, 8], 0.1, 1.0);
    let grad = |mode| -> Result<Vec<f64>> {
        let tape = Tape::new();
        let xl = tape.leaf(&x);
        let logits = model.forward_with(&xl, &model.constants(), None)?.logits;
        let y = logits.mul(&one_hot(&[2], 4)?)?.sum()?;
        Ok(backward(&y, &[&xl], BackwardOptions { mode, create_graph: false })?.remove(0).to_vec())
    };
    let (s, g) = (grad(GradMode::Standard)?, grad(GradMode::Guided)?);
    Ok(s.iter().zip(&g).filter(|(a, b)| a != b).count())
}

/// First- and second-order checks of every primitive over `cfg.seeds` seeds.
pub fn check_ops(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    let mut checks = Vec::new();
    Checker { cfg }.run_ops(&mut checks)?;
    Ok(checks)
}

/// Parameter gradient of the full loss (Cosine error at weight `lambda`)
/// on [`network_fixture`] against finite differences.
pub fn check_network(cfg: &GradcheckConfig, lambda: f64, name: &str) -> Result<CheckResult> {
    let err = Checker { cfg }.network(lambda)?;
    Ok(CheckResult { name: name.into(), cases: 1, max_error: err, tolerance: cfg.network_rel_tol, passed: err <= cfg.network_rel_tol })
}

/// Runs the whole suite.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let started = Instant::now();
    let mut report = GradcheckReport { checks: check_ops(cfg)?, seconds: 0.0 };
    report.checks.push(check_network(cfg, DEFAULT_LAMBDA, "double_backward:network")?);
    report.checks.push(check_network(cfg, 1.0, "double_backward:network_lambda1")?);
    let (neg, standard_neg) = guided_sign_check(cfg.guided_nets)?;
    report.checks.push(CheckResult {
        name: "guided:nonnegative".into(),
        cases: cfg.guided_nets,
        max_error: neg as f64,
        tolerance: 0.0,
        passed: neg == 0 && standard_neg > 0,
    });
    let diff = guided_locality_check()?;
    report.checks.push(CheckResult {
        name: "guided:locality".into(),
        cases: 1,
        max_error: diff as f64,
        tolerance: 0.0,
        passed: diff == 0,
    });
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}
