use std::rc::Rc;

use super::kernels::{broadcast_shape, numel, zip_broadcast};
use super::tape::Saved;
use super::{forward_primitive, NodeRef, Op, Tensor};
use crate::error::{Error, Result};

/// Which chain rule ReLU nodes apply on the way back.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GradMode {
    /// `δu = 1[u>0] · δv`
    #[default]
    Standard,
    /// `δu = 1[u>0] · max(δv, 0)`; all other ops unchanged.
    Guided,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct BackwardOptions {
    pub mode: GradMode,
    /// Record the backward pass so the returned gradients are themselves
    /// differentiable. Not allowed together with [`GradMode::Guided`].
    pub create_graph: bool,
}

impl BackwardOptions {
    pub fn standard() -> Self {
        Self::default()
    }

    pub fn guided() -> Self {
        Self { mode: GradMode::Guided, create_graph: false }
    }

    pub fn create_graph() -> Self {
        Self { mode: GradMode::Standard, create_graph: true }
    }
}

/// Gradients plus the gradient emitted by every ReLU node along the way.
pub struct BackwardTrace {
    pub grads: Vec<Tensor>,
    /// One entry per ReLU node visited, in reverse tape order.
    pub relu_emissions: Vec<Tensor>,
}

/// Reverse-mode gradient of the scalar `output` with respect to each of `wrt`.
pub fn backward(output: &Tensor, wrt: &[&Tensor], opts: BackwardOptions) -> Result<Vec<Tensor>> {
    run(output, wrt, opts, false).map(|t| t.grads)
}

/// Like [`backward`], additionally returning what every ReLU node emitted.
pub fn backward_traced(output: &Tensor, wrt: &[&Tensor], opts: BackwardOptions) -> Result<BackwardTrace> {
    run(output, wrt, opts, true)
}

fn run(output: &Tensor, wrt: &[&Tensor], opts: BackwardOptions, trace: bool) -> Result<BackwardTrace> {
    if opts.create_graph && opts.mode == GradMode::Guided {
        return Err(Error::Backward(
            "guided gradients are detached; create_graph is not supported in guided mode".into(),
        ));
    }
    if output.numel() != 1 {
        return Err(Error::Backward(format!("output must be a scalar, got shape {:?}", output.shape())));
    }
    let root = output
        .node
        .as_ref()
        .ok_or_else(|| Error::Backward("output is not on a tape".into()))?;
    let tape = root.tape.clone();
    let mut wrt_ids = Vec::with_capacity(wrt.len());
    for (i, w) in wrt.iter().enumerate() {
        match &w.node {
            Some(n) if n.tape.same(&tape) => wrt_ids.push(n.id),
            _ => return Err(Error::Backward(format!("wrt tensor {i} is not on the output's tape"))),
        }
    }

    let n = root.id + 1;
    // nodes on some path into a wrt tensor
    let mut reach = vec![false; n];
    for &id in &wrt_ids {
        if id < n {
            reach[id] = true;
        }
    }
    for (i, r) in reach.clone().iter().enumerate() {
        if !r && tape.input_ids(i).iter().any(|p| p.is_some_and(|p| reach[p])) {
            reach[i] = true;
        }
    }

    let fault = tape.fault();
    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    grads[root.id] = Some(Tensor::ones(output.shape()));
    let mut relu_emissions = Vec::new();

    for i in (0..n).rev() {
        if !reach[i] {
            continue;
        }
        let Some(g) = grads[i].clone() else { continue };
        let node = tape.node(i);
        if node.op == Op::Leaf {
            continue;
        }
        let need: Vec<bool> = node.inputs.iter().map(|s| s.id.is_some_and(|p| reach[p])).collect();
        if !need.iter().any(|&b| b) {
            continue;
        }
        let rebuild = |s: &Saved| {
            let t = Tensor::from_parts(s.shape.clone(), s.data.clone());
            match (opts.create_graph, s.id) {
                (true, Some(id)) => Tensor { node: Some(NodeRef { tape: tape.clone(), id }), ..t },
                _ => t,
            }
        };
        let inputs: Vec<Tensor> = node.inputs.iter().map(rebuild).collect();
        let out = rebuild(&node.output);
        let mut emitted = vjp(&node.op, node.aux.as_ref(), &inputs, &out, &g, &need, opts.mode)?;
        if fault.as_deref() == Some(node.op.name()) {
            for e in emitted.iter_mut().flatten() {
                *e = e.scale(1.5)?;
            }
        }
        if trace && node.op == Op::Relu {
            if let Some(e) = &emitted[0] {
                relu_emissions.push(e.detach());
            }
        }
        for (s, e) in node.inputs.iter().zip(emitted) {
            if let (Some(p), Some(e)) = (s.id, e) {
                grads[p] = Some(match grads[p].take() {
                    Some(acc) => acc.add(&e)?,
                    None => e,
                });
            }
        }
    }

    let grads = wrt_ids
        .iter()
        .zip(wrt)
        .map(|(&id, w)| {
            grads
                .get(id)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(w.shape()))
        })
        .collect();
    Ok(BackwardTrace { grads, relu_emissions })
}

fn constant(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::from_parts(shape.to_vec(), Rc::new(data))
}

fn reduce(t: Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() == shape {
        Ok(t)
    } else {
        t.sum_to(shape)
    }
}

fn mask(t: &Tensor, f: impl Fn(f64) -> bool) -> Tensor {
    constant(t.shape(), t.data().iter().map(|&v| if f(v) { 1.0 } else { 0.0 }).collect())
}

/// Vector-Jacobian products, each written in terms of recorded primitives.
fn vjp(
    op: &Op,
    aux: Option<&Rc<Vec<usize>>>,
    x: &[Tensor],
    y: &Tensor,
    g: &Tensor,
    need: &[bool],
    mode: GradMode,
) -> Result<Vec<Option<Tensor>>> {
    let pick = |rules: Vec<&dyn Fn() -> Result<Tensor>>| -> Result<Vec<Option<Tensor>>> {
        rules
            .into_iter()
            .zip(need)
            .map(|(r, &n)| if n { r().map(Some) } else { Ok(None) })
            .collect()
    };
    match op {
        Op::Leaf => Ok(vec![]),
        Op::Add => pick(vec![&|| reduce(g.clone(), x[0].shape()), &|| reduce(g.clone(), x[1].shape())]),
        Op::Sub => pick(vec![&|| reduce(g.clone(), x[0].shape()), &|| reduce(g.neg()?, x[1].shape())]),
        Op::Mul => pick(vec![
            &|| reduce(g.mul(&x[1])?, x[0].shape()),
            &|| reduce(g.mul(&x[0])?, x[1].shape()),
        ]),
        Op::Div => pick(vec![
            &|| reduce(g.div(&x[1])?, x[0].shape()),
            &|| reduce(g.mul(y)?.div(&x[1])?.neg()?, x[1].shape()),
        ]),
        Op::Minimum => {
            let out = broadcast_shape(x[0].shape(), x[1].shape()).expect("checked in forward");
            let first = zip_broadcast(x[0].data(), x[0].shape(), x[1].data(), x[1].shape(), &out, |a, b| {
                if a <= b { 1.0 } else { 0.0 }
            });
            let second = first.iter().map(|m| 1.0 - m).collect();
            let (ma, mb) = (constant(&out, first), constant(&out, second));
            pick(vec![
                &|| reduce(g.mul(&ma)?, x[0].shape()),
                &|| reduce(g.mul(&mb)?, x[1].shape()),
            ])
        }
        Op::Neg => pick(vec![&|| g.neg()]),
        Op::Scale(c) => pick(vec![&|| g.scale(*c)]),
        Op::Abs => {
            let sign = constant(x[0].shape(), x[0].data().iter().map(|&v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }).collect());
            pick(vec![&|| g.mul(&sign)])
        }
        Op::Exp => pick(vec![&|| g.mul(y)]),
        Op::Log => pick(vec![&|| g.div(&x[0])]),
        Op::Sqrt => pick(vec![&|| g.div(y)?.scale(0.5)]),
        Op::Relu => {
            let gate = mask(&x[0], |v| v > 0.0);
            match mode {
                GradMode::Standard => pick(vec![&|| g.mul(&gate)]),
                GradMode::Guided => pick(vec![&|| g.relu()?.mul(&gate)]),
            }
        }
        Op::Matmul => pick(vec![
            &|| g.matmul(&x[1].transpose()?),
            &|| x[0].transpose()?.matmul(g),
        ]),
        Op::Transpose => pick(vec![&|| g.transpose()]),
        Op::Linear => pick(vec![
            &|| g.matmul(&x[1]),
            &|| g.transpose()?.matmul(&x[0]),
            &|| g.sum_to(x[2].shape()),
        ]),
        Op::Conv2d { stride, pad } => {
            let (s, p) = (*stride, *pad);
            let xs = x[0].shape();
            let ks = x[1].shape();
            pick(vec![
                &|| forward_primitive(Op::Conv2dInputGrad { stride: s, pad: p, input_hw: (xs[2], xs[3]) }, &[g, &x[1]]),
                &|| forward_primitive(Op::Conv2dWeightGrad { stride: s, pad: p, kernel_hw: (ks[2], ks[3]) }, &[&x[0], g]),
            ])
        }
        Op::Conv2dInputGrad { stride, pad, .. } => {
            // y = T(gy, k); upstream g has the shape of the original conv input
            let (s, p) = (*stride, *pad);
            let ks = x[1].shape();
            pick(vec![
                &|| g.conv2d(&x[1], s, p),
                &|| forward_primitive(Op::Conv2dWeightGrad { stride: s, pad: p, kernel_hw: (ks[2], ks[3]) }, &[g, &x[0]]),
            ])
        }
        Op::Conv2dWeightGrad { stride, pad, .. } => {
            // y = W(x, gy); upstream g has the shape of the kernel
            let (s, p) = (*stride, *pad);
            let xs = x[0].shape();
            pick(vec![
                &|| forward_primitive(Op::Conv2dInputGrad { stride: s, pad: p, input_hw: (xs[2], xs[3]) }, &[&x[1], g]),
                &|| x[0].conv2d(g, s, p),
            ])
        }
        Op::MaxPool2d { .. } => {
            let index = aux.expect("max-pool node without argmax").clone();
            pick(vec![&|| {
                forward_primitive(Op::PoolScatter { index: index.clone(), input_shape: x[0].shape().to_vec() }, &[g])
            }])
        }
        Op::PoolScatter { index, .. } => pick(vec![&|| {
            forward_primitive(Op::PoolGather { index: index.clone(), output_shape: x[0].shape().to_vec() }, &[g])
        }]),
        Op::PoolGather { index, .. } => pick(vec![&|| {
            forward_primitive(Op::PoolScatter { index: index.clone(), input_shape: x[0].shape().to_vec() }, &[g])
        }]),
        Op::GlobalAvgPool => {
            let s = x[0].shape();
            pick(vec![&|| {
                g.reshape(&[s[0], s[1], 1, 1])?.broadcast_to(s)?.scale(1.0 / (s[2] * s[3]) as f64)
            }])
        }
        Op::Softmax => pick(vec![&|| {
            let dot = g.mul(y)?.sum_last()?;
            y.mul(&g.sub(&dot)?)
        }]),
        Op::LogSoftmax => pick(vec![&|| g.sub(&y.exp()?.mul(&g.sum_last()?)?)]),
        Op::Sum => pick(vec![&|| g.broadcast_to(x[0].shape())]),
        Op::Mean => pick(vec![&|| g.broadcast_to(x[0].shape())?.scale(1.0 / numel(x[0].shape()) as f64)]),
        Op::SumLast => pick(vec![&|| g.broadcast_to(x[0].shape())]),
        Op::Reshape(_) => pick(vec![&|| g.reshape(x[0].shape())]),
        Op::BroadcastTo(_) => pick(vec![&|| g.sum_to(x[0].shape())]),
        Op::SumTo(_) => pick(vec![&|| g.broadcast_to(x[0].shape())]),
        Op::Pad2d(p) => pick(vec![&|| g.crop2d(*p)]),
        Op::Crop2d(p) => pick(vec![&|| g.pad2d(*p)]),
    }
}
