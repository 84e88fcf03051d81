//! Dense `f64` tensors and a tape-based reverse-mode differentiation engine.
//!
//! A [`Tensor`] is either a constant (no tape node) or a node on a [`Tape`].
//! Operations on tensors that carry a node are recorded; operations on
//! constants are plain computation. [`backward`] walks the tape in reverse
//! and, with `create_graph`, records its own work on the same tape so the
//! returned gradients can be differentiated again. Every backward rule is a
//! composition of the same primitives, which is what makes second-order
//! gradients (double backpropagation) exact.
//!
//! ```
//! use igrad::tensor::{backward, BackwardOptions, Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(&Tensor::scalar(3.0));
//! let y = x.mul(&x).unwrap();
//! let g = backward(&y, &[&x], BackwardOptions::default()).unwrap();
//! assert_eq!(g[0].item(), 6.0);
//! ```

mod backward;
pub mod finite_diff;
pub(crate) mod kernels;
mod tape;

use std::rc::Rc;

use crate::error::{arg_err, shape_err, Result};
use kernels::{broadcast_shape, broadcasts_to, numel, ConvGeom};

pub use backward::{backward, backward_traced, BackwardOptions, BackwardTrace, GradMode};
pub use finite_diff::finite_diff_gradient;
pub use tape::Tape;

/// Handle to a recorded node.
#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

/// An n-dimensional row-major array of `f64`, optionally attached to a tape.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<NodeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("node", &self.node.as_ref().map(|n| n.id))
            .field("data", &self.data)
            .finish()
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {} elements, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Self::from_parts(shape, Rc::new(data)))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Rc<Vec<f64>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data, node: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], Rc::new(vec![v]))
    }

    pub fn vector(v: Vec<f64>) -> Self {
        Self::from_parts(vec![v.len()], Rc::new(v))
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::from_parts(shape.to_vec(), Rc::new(vec![v; numel(shape)]))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> &Rc<Vec<f64>> {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    ///
    /// Panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// True when the tensor is a tape node and can receive gradient.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Same values, cut from the tape.
    pub fn detach(&self) -> Tensor {
        Self { shape: self.shape.clone(), data: self.data.clone(), node: None }
    }

    // ---- recorded operations -------------------------------------------------

    pub fn add(&self, o: &Tensor) -> Result<Tensor> {
        forward_primitive(Op::Add, &[self, o])
    }
    pub fn sub(&self, o: &Tensor) -> Result<Tensor> {
        forward_primitive(Op::Sub, &[self, o])
    }
    pub fn mul(&self, o: &Tensor) -> Result<Tensor> {
        forward_primitive(Op::Mul, &[self, o])
    }
    pub fn div(&self, o: &Tensor) -> Result<Tensor> {
        forward_primitive(Op::Div, &[self, o])
    }
    /// Element-wise minimum; on ties the gradient goes to `self`.
    pub fn minimum(&self, o: &Tensor) -> Result<Tensor> {
        forward_primitive(Op::Minimum, &[self, o])
    }
    pub fn neg(&self) -> Result<Tensor> {
        forward_primitive(Op::Neg, &[self])
    }
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        forward_primitive(Op::Scale(c), &[self])
    }
    pub fn abs(&self) -> Result<Tensor> {
        forward_primitive(Op::Abs, &[self])
    }
    pub fn exp(&self) -> Result<Tensor> {
        forward_primitive(Op::Exp, &[self])
    }
    pub fn ln(&self) -> Result<Tensor> {
        forward_primitive(Op::Log, &[self])
    }
    pub fn sqrt(&self) -> Result<Tensor> {
        forward_primitive(Op::Sqrt, &[self])
    }
    pub fn relu(&self) -> Result<Tensor> {
        forward_primitive(Op::Relu, &[self])
    }
    pub fn matmul(&self, o: &Tensor) -> Result<Tensor> {
        forward_primitive(Op::Matmul, &[self, o])
    }
    pub fn transpose(&self) -> Result<Tensor> {
        forward_primitive(Op::Transpose, &[self])
    }
    /// `self[n, in] · weight[out, in]ᵀ + bias[out]`.
    pub fn linear(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        forward_primitive(Op::Linear, &[self, weight, bias])
    }
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        forward_primitive(Op::Conv2d { stride, pad }, &[self, kernel])
    }
    pub fn max_pool2d(&self, kernel: usize, stride: usize) -> Result<Tensor> {
        forward_primitive(Op::MaxPool2d { kernel, stride }, &[self])
    }
    /// `[n, c, h, w] -> [n, c]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        forward_primitive(Op::GlobalAvgPool, &[self])
    }
    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        forward_primitive(Op::Softmax, &[self])
    }
    /// Log-softmax over the last axis (log-sum-exp stabilised).
    pub fn log_softmax(&self) -> Result<Tensor> {
        forward_primitive(Op::LogSoftmax, &[self])
    }
    /// Sum of all elements, shape `[]`.
    pub fn sum(&self) -> Result<Tensor> {
        forward_primitive(Op::Sum, &[self])
    }
    pub fn mean(&self) -> Result<Tensor> {
        forward_primitive(Op::Mean, &[self])
    }
    /// Sum over the last axis, keeping it with extent 1.
    pub fn sum_last(&self) -> Result<Tensor> {
        forward_primitive(Op::SumLast, &[self])
    }
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        forward_primitive(Op::Reshape(shape.to_vec()), &[self])
    }
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        forward_primitive(Op::BroadcastTo(shape.to_vec()), &[self])
    }
    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        forward_primitive(Op::SumTo(shape.to_vec()), &[self])
    }
    /// Zero-pads the two trailing (spatial) axes of a 4-D tensor.
    pub fn pad2d(&self, pad: usize) -> Result<Tensor> {
        forward_primitive(Op::Pad2d(pad), &[self])
    }
    pub fn crop2d(&self, pad: usize) -> Result<Tensor> {
        forward_primitive(Op::Crop2d(pad), &[self])
    }
}

/// A primitive operation together with its static attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Minimum,
    Neg,
    Scale(f64),
    Abs,
    Exp,
    Log,
    Sqrt,
    Relu,
    Matmul,
    Transpose,
    Linear,
    Conv2d { stride: usize, pad: usize },
    /// Transposed convolution `(gy, kernel) -> dx`, adjoint of `Conv2d` in its input.
    Conv2dInputGrad { stride: usize, pad: usize, input_hw: (usize, usize) },
    /// Kernel correlation `(x, gy) -> dk`, adjoint of `Conv2d` in its kernel.
    Conv2dWeightGrad { stride: usize, pad: usize, kernel_hw: (usize, usize) },
    MaxPool2d { kernel: usize, stride: usize },
    /// Scatter-add into `input_shape` at fixed indices (max-pool backward).
    PoolScatter { index: Rc<Vec<usize>>, input_shape: Vec<usize> },
    /// Gather at fixed indices into `output_shape` (adjoint of `PoolScatter`).
    PoolGather { index: Rc<Vec<usize>>, output_shape: Vec<usize> },
    GlobalAvgPool,
    Softmax,
    LogSoftmax,
    Sum,
    Mean,
    SumLast,
    Reshape(Vec<usize>),
    BroadcastTo(Vec<usize>),
    SumTo(Vec<usize>),
    Pad2d(usize),
    Crop2d(usize),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Minimum => "minimum",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Abs => "abs",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Relu => "relu",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Linear => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv2dInputGrad { .. } => "conv2d_input_grad",
            Op::Conv2dWeightGrad { .. } => "conv2d_weight_grad",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::PoolScatter { .. } => "pool_scatter",
            Op::PoolGather { .. } => "pool_gather",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumLast => "sum_last",
            Op::Reshape(_) => "reshape",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::SumTo(_) => "sum_to",
            Op::Pad2d(_) => "pad",
            Op::Crop2d(_) => "crop",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Op::Leaf => 0,
            Op::Add
            | Op::Sub
            | Op::Mul
            | Op::Div
            | Op::Minimum
            | Op::Matmul
            | Op::Conv2d { .. }
            | Op::Conv2dInputGrad { .. }
            | Op::Conv2dWeightGrad { .. } => 2,
            Op::Linear => 3,
            _ => 1,
        }
    }
}

/// Output of evaluating an op on raw buffers.
pub(crate) struct Computed {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Argmax indices for max-pool.
    pub aux: Option<Rc<Vec<usize>>>,
}

fn dims4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(shape_err(op, format!("expected a 4-D tensor, got {s:?}"))),
    }
}

fn unary(x: &[f64], f: impl Fn(f64) -> f64) -> Vec<f64> {
    x.iter().map(|&v| f(v)).collect()
}

/// Evaluates `op` on `inputs` (shape, data) pairs without touching any tape.
pub(crate) fn compute(op: &Op, inputs: &[(&[usize], &[f64])]) -> Result<Computed> {
    let name = op.name();
    if inputs.len() != op.arity() {
        return Err(arg_err(name, format!("expected {} inputs, got {}", op.arity(), inputs.len())));
    }
    let done = |shape: Vec<usize>, data: Vec<f64>| Ok(Computed { shape, data, aux: None });
    let binary = |f: fn(f64, f64) -> f64| -> Result<Computed> {
        let ((sa, a), (sb, b)) = (inputs[0], inputs[1]);
        let out = broadcast_shape(sa, sb)
            .ok_or_else(|| shape_err(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let data = kernels::zip_broadcast(a, sa, b, sb, &out, f);
        done(out, data)
    };
    match op {
        Op::Leaf => Err(arg_err(name, "leaves are not computed")),
        Op::Add => binary(|a, b| a + b),
        Op::Sub => binary(|a, b| a - b),
        Op::Mul => binary(|a, b| a * b),
        Op::Div => binary(|a, b| a / b),
        Op::Minimum => binary(|a, b| if a <= b { a } else { b }),
        Op::Neg => done(inputs[0].0.to_vec(), unary(inputs[0].1, |v| -v)),
        Op::Scale(c) => {
            let c = *c;
            done(inputs[0].0.to_vec(), unary(inputs[0].1, |v| v * c))
        }
        Op::Abs => done(inputs[0].0.to_vec(), unary(inputs[0].1, f64::abs)),
        Op::Exp => done(inputs[0].0.to_vec(), unary(inputs[0].1, f64::exp)),
        Op::Log => done(inputs[0].0.to_vec(), unary(inputs[0].1, f64::ln)),
        Op::Sqrt => done(inputs[0].0.to_vec(), unary(inputs[0].1, f64::sqrt)),
        Op::Relu => done(inputs[0].0.to_vec(), unary(inputs[0].1, |v| if v > 0.0 { v } else { 0.0 })),
        Op::Matmul => {
            let ((sa, a), (sb, b)) = (inputs[0], inputs[1]);
            match (sa, sb) {
                ([m, k], [k2, n]) if k == k2 => done(vec![*m, *n], kernels::matmul(a, b, *m, *k, *n)),
                _ => Err(shape_err(name, format!("cannot multiply {sa:?} by {sb:?}"))),
            }
        }
        Op::Transpose => match inputs[0].0 {
            [m, n] => done(vec![*n, *m], kernels::transpose(inputs[0].1, *m, *n)),
            s => Err(shape_err(name, format!("expected a 2-D tensor, got {s:?}"))),
        },
        Op::Linear => {
            let ((sx, x), (sw, w), (sb, b)) = (inputs[0], inputs[1], inputs[2]);
            match (sx, sw, sb) {
                ([n, i], [o, i2], [o2]) if i == i2 && o == o2 => {
                    let wt = kernels::transpose(w, *o, *i);
                    let mut y = kernels::matmul(x, &wt, *n, *i, *o);
                    for row in y.chunks_mut(*o) {
                        row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
                    }
                    done(vec![*n, *o], y)
                }
                _ => Err(shape_err(
                    name,
                    format!("input {sx:?}, weight {sw:?}, bias {sb:?} do not conform"),
                )),
            }
        }
        Op::Conv2d { stride, pad } => {
            let ((sx, x), (sk, k)) = (inputs[0], inputs[1]);
            let (n, c, h, w) = dims4(name, sx)?;
            let (o, kc, kh, kw) = dims4(name, sk)?;
            if kc != c {
                return Err(shape_err(name, format!("input {sx:?} has {c} channels, kernel {sk:?} expects {kc}")));
            }
            let g = conv_geom(name, (n, c, h, w), (o, kh, kw), *stride, *pad)?;
            done(vec![n, o, g.oh, g.ow], kernels::conv2d(x, k, &g))
        }
        Op::Conv2dInputGrad { stride, pad, input_hw } => {
            let ((sg, gy), (sk, k)) = (inputs[0], inputs[1]);
            let (n, o, gh, gw) = dims4(name, sg)?;
            let (ko, c, kh, kw) = dims4(name, sk)?;
            let g = conv_geom(name, (n, c, input_hw.0, input_hw.1), (o, kh, kw), *stride, *pad)?;
            if ko != o || (g.oh, g.ow) != (gh, gw) {
                return Err(shape_err(name, format!("gradient {sg:?} does not match kernel {sk:?} / input {input_hw:?}")));
            }
            done(vec![n, c, g.h, g.w], kernels::conv2d_input_grad(gy, k, &g))
        }
        Op::Conv2dWeightGrad { stride, pad, kernel_hw } => {
            let ((sx, x), (sg, gy)) = (inputs[0], inputs[1]);
            let (n, c, h, w) = dims4(name, sx)?;
            let (gn, o, gh, gw) = dims4(name, sg)?;
            let g = conv_geom(name, (n, c, h, w), (o, kernel_hw.0, kernel_hw.1), *stride, *pad)?;
            if gn != n || (g.oh, g.ow) != (gh, gw) {
                return Err(shape_err(name, format!("gradient {sg:?} does not match input {sx:?}")));
            }
            done(vec![o, c, g.kh, g.kw], kernels::conv2d_weight_grad(x, gy, &g))
        }
        Op::MaxPool2d { kernel, stride } => {
            let (sx, x) = inputs[0];
            let (n, c, h, w) = dims4(name, sx)?;
            if *kernel == 0 || *stride == 0 || *kernel > h || *kernel > w {
                return Err(arg_err(name, format!("kernel {kernel} / stride {stride} invalid for input {sx:?}")));
            }
            let (data, arg, oh, ow) = kernels::max_pool2d(x, (n, c, h, w), *kernel, *stride);
            Ok(Computed { shape: vec![n, c, oh, ow], data, aux: Some(Rc::new(arg)) })
        }
        Op::PoolScatter { index, input_shape } => {
            let (sg, g) = inputs[0];
            if g.len() != index.len() {
                return Err(shape_err(name, format!("{sg:?} vs {} indices", index.len())));
            }
            let mut out = vec![0.0; numel(input_shape)];
            for (&i, &v) in index.iter().zip(g) {
                out[i] += v;
            }
            done(input_shape.clone(), out)
        }
        Op::PoolGather { index, output_shape } => {
            let (_, x) = inputs[0];
            if numel(output_shape) != index.len() || index.iter().any(|&i| i >= x.len()) {
                return Err(shape_err(name, format!("indices do not fit {:?}", inputs[0].0)));
            }
            done(output_shape.clone(), index.iter().map(|&i| x[i]).collect())
        }
        Op::GlobalAvgPool => {
            let (sx, x) = inputs[0];
            let (n, c, h, w) = dims4(name, sx)?;
            let z = (h * w) as f64;
            let data = x.chunks(h * w).map(|p| p.iter().sum::<f64>() / z).collect();
            done(vec![n, c], data)
        }
        Op::Softmax | Op::LogSoftmax => {
            let (sx, x) = inputs[0];
            let cols = *sx.last().ok_or_else(|| shape_err(name, "scalar input"))?;
            if cols == 0 {
                return Err(shape_err(name, format!("empty last axis in {sx:?}")));
            }
            let data = if matches!(op, Op::Softmax) {
                kernels::softmax_rows(x, cols)
            } else {
                kernels::log_softmax_rows(x, cols)
            };
            done(sx.to_vec(), data)
        }
        Op::Sum => done(vec![], vec![inputs[0].1.iter().sum()]),
        Op::Mean => {
            let x = inputs[0].1;
            if x.is_empty() {
                return Err(shape_err(name, "mean of empty tensor"));
            }
            done(vec![], vec![x.iter().sum::<f64>() / x.len() as f64])
        }
        Op::SumLast => {
            let (sx, x) = inputs[0];
            let cols = *sx.last().ok_or_else(|| shape_err(name, "scalar input"))?;
            let mut shape = sx.to_vec();
            *shape.last_mut().unwrap() = 1;
            let data = if cols == 0 {
                vec![0.0; numel(&shape)]
            } else {
                x.chunks(cols).map(|r| r.iter().sum()).collect()
            };
            done(shape, data)
        }
        Op::Reshape(shape) => {
            let (sx, x) = inputs[0];
            if numel(shape) != x.len() {
                return Err(shape_err(name, format!("cannot reshape {sx:?} into {shape:?}")));
            }
            done(shape.clone(), x.to_vec())
        }
        Op::BroadcastTo(shape) => {
            let (sx, x) = inputs[0];
            if !broadcasts_to(sx, shape) {
                return Err(shape_err(name, format!("cannot broadcast {sx:?} to {shape:?}")));
            }
            done(shape.clone(), kernels::broadcast_to(x, sx, shape))
        }
        Op::SumTo(shape) => {
            let (sx, x) = inputs[0];
            if !broadcasts_to(shape, sx) {
                return Err(shape_err(name, format!("cannot sum {sx:?} down to {shape:?}")));
            }
            done(shape.clone(), kernels::sum_to(x, sx, shape))
        }
        Op::Pad2d(p) => {
            let (sx, x) = inputs[0];
            let (n, c, h, w) = dims4(name, sx)?;
            done(vec![n, c, h + 2 * p, w + 2 * p], kernels::pad2d(x, (n, c, h, w), *p))
        }
        Op::Crop2d(p) => {
            let (sx, x) = inputs[0];
            let (n, c, h, w) = dims4(name, sx)?;
            if h < 2 * p || w < 2 * p {
                return Err(shape_err(name, format!("cannot crop {p} from {sx:?}")));
            }
            done(vec![n, c, h - 2 * p, w - 2 * p], kernels::crop2d(x, (n, c, h, w), *p))
        }
    }
}

fn conv_geom(
    name: &'static str,
    input: (usize, usize, usize, usize),
    kernel: (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    if stride < 1 {
        return Err(arg_err(name, format!("stride {stride} < 1")));
    }
    ConvGeom::new(input, kernel, stride, pad).ok_or_else(|| {
        arg_err(
            name,
            format!(
                "kernel {}x{} larger than padded input {}x{}",
                kernel.1,
                kernel.2,
                input.2 + 2 * pad,
                input.3 + 2 * pad
            ),
        )
    })
}

/// Applies `op` to `inputs`, recording it when any input is a tape node.
pub fn forward_primitive(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let raw: Vec<(&[usize], &[f64])> = inputs.iter().map(|t| (t.shape(), t.data())).collect();
    let out = compute(&op, &raw)?;
    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some(n) = &t.node {
            match tape {
                None => tape = Some(&n.tape),
                Some(tp) if tp.same(&n.tape) => {}
                Some(_) => return Err(arg_err(op.name(), "inputs live on different tapes")),
            }
        }
    }
    let data = Rc::new(out.data);
    let result = Tensor::from_parts(out.shape, data);
    match tape {
        None => Ok(result),
        Some(tp) => Ok(tp.record(op, out.aux, inputs, result)),
    }
}
