//! ReLU CNNs with a flat, ordered parameter store.

mod arch;
mod checkpoint;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use arch::{ArchitectureSpec, BlockSpec};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Name under which the feature map feeding global average pooling is exposed.
pub const LAST_CONV: &str = "last_conv";

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv { name: String, w: usize, b: usize, stride: usize, pad: usize },
    MaxPool { name: String, kernel: usize, stride: usize },
    Residual { name: String, a: (usize, usize), b: (usize, usize), proj: Option<(usize, usize)>, stride: usize },
}

/// The network `f(x; θ)`.
#[derive(Debug)]
pub struct Model {
    spec: ArchitectureSpec,
    seed: u64,
    params: Vec<Param>,
    layers: Vec<Layer>,
    head: (usize, usize),
    feature_shapes: BTreeMap<String, [usize; 3]>,
    forward_calls: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            seed: self.seed,
            params: self.params.clone(),
            layers: self.layers.clone(),
            head: self.head,
            feature_shapes: self.feature_shapes.clone(),
            forward_calls: AtomicUsize::new(0),
        }
    }
}

/// Result of one forward pass.
pub struct ForwardOutput {
    /// `[n, classes]`
    pub logits: Tensor,
    /// Row-wise softmax of `logits`.
    pub probabilities: Tensor,
    /// Post-activation output of every block, keyed by block name, plus
    /// [`LAST_CONV`] for the map that enters global average pooling.
    pub feature_maps: BTreeMap<String, Tensor>,
}

/// Replaces the named feature map during a forward pass.
pub type Intervention<'a> = (&'a str, &'a dyn Fn(&Tensor) -> Result<Tensor>);

fn kaiming(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, name: String) -> Param {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Param { name, shape, data }
}

fn zeros(shape: Vec<usize>, name: String) -> Param {
    let n = shape.iter().product();
    Param { name, shape, data: vec![0.0; n] }
}

/// Builds `spec` with Kaiming-uniform weights (fan-in) and zero biases.
pub fn build_model(spec: &ArchitectureSpec, seed: u64) -> Result<Model> {
    let shapes = spec.shape_chain()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::new();
    let mut push = |p: Param| {
        params.push(p);
        params.len() - 1
    };
    let mut layers = Vec::new();
    let mut feature_shapes = BTreeMap::new();
    let mut cin = spec.input[0];
    for (block, out_shape) in spec.blocks.iter().zip(&shapes) {
        match block {
            BlockSpec::Conv { name, out_channels: o, kernel: k, stride, padding, .. } => {
                let w = push(kaiming(&mut rng, vec![*o, cin, *k, *k], cin * k * k, format!("{name}.weight")));
                let b = push(zeros(vec![*o], format!("{name}.bias")));
                layers.push(Layer::Conv { name: name.clone(), w, b, stride: *stride, pad: *padding });
                cin = *o;
            }
            BlockSpec::MaxPool { name, kernel, stride } => {
                layers.push(Layer::MaxPool { name: name.clone(), kernel: *kernel, stride: *stride });
            }
            BlockSpec::Residual { name, out_channels: o, stride, .. } => {
                let aw = push(kaiming(&mut rng, vec![*o, cin, 3, 3], cin * 9, format!("{name}.conv_a.weight")));
                let ab = push(zeros(vec![*o], format!("{name}.conv_a.bias")));
                let bw = push(kaiming(&mut rng, vec![*o, *o, 3, 3], o * 9, format!("{name}.conv_b.weight")));
                let bb = push(zeros(vec![*o], format!("{name}.conv_b.bias")));
                let proj = if *stride != 1 || cin != *o {
                    let pw = push(kaiming(&mut rng, vec![*o, cin, 1, 1], cin, format!("{name}.proj.weight")));
                    let pb = push(zeros(vec![*o], format!("{name}.proj.bias")));
                    Some((pw, pb))
                } else {
                    None
                };
                layers.push(Layer::Residual { name: name.clone(), a: (aw, ab), b: (bw, bb), proj, stride: *stride });
                cin = *o;
            }
        }
        feature_shapes.insert(block.name().to_string(), *out_shape);
    }
    feature_shapes.insert(LAST_CONV.to_string(), *shapes.last().unwrap());
    let fw = push(kaiming(&mut rng, vec![spec.classes, cin], cin, "fc.weight".into()));
    let fb = push(zeros(vec![spec.classes], "fc.bias".into()));
    Ok(Model {
        spec: spec.clone(),
        seed,
        params,
        layers,
        head: (fw, fb),
        feature_shapes,
        forward_calls: AtomicUsize::new(0),
    })
}

fn conv_bias(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let o = b.shape()[0];
    x.conv2d(w, stride, pad)?.add(&b.reshape(&[1, o, 1, 1])?)
}

impl Model {
    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.spec.input
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Model(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.data.len();
            p.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// `[c, h, w]` of each exposed feature map.
    pub fn feature_shapes(&self) -> &BTreeMap<String, [usize; 3]> {
        &self.feature_shapes
    }

    /// Parameters as differentiable leaves on `tape`, in store order.
    pub fn bind(&self, tape: &Tape) -> Vec<Tensor> {
        self.constants().iter().map(|t| tape.leaf(t)).collect()
    }

    /// Parameters as constants, in store order.
    pub fn constants(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| Tensor::new(p.shape.clone(), p.data.clone()).expect("param shape"))
            .collect()
    }

    /// Number of forward passes run on this model instance so far.
    pub fn forward_count(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// Forward pass with constant parameters (nothing recorded unless `x` is a node).
    pub fn forward(&self, x: &Tensor) -> Result<ForwardOutput> {
        self.forward_with(x, &self.constants(), None)
    }

    /// Forward pass of a `[n, c, h, w]` batch with the given parameter tensors.
    pub fn forward_with(
        &self,
        x: &Tensor,
        params: &[Tensor],
        intervention: Option<Intervention<'_>>,
    ) -> Result<ForwardOutput> {
        let [c, h, w] = self.spec.input;
        match x.shape() {
            [_, xc, xh, xw] if (*xc, *xh, *xw) == (c, h, w) => {}
            s => {
                return Err(Error::Shape {
                    op: "forward",
                    detail: format!("expected [n, {c}, {h}, {w}], got {s:?}"),
                })
            }
        }
        if params.len() != self.params.len() {
            return Err(Error::Model(format!("expected {} parameter tensors, got {}", self.params.len(), params.len())));
        }
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let mut maps = BTreeMap::new();
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let (name, out) = match layer {
                Layer::Conv { name, w, b, stride, pad } => {
                    (name, conv_bias(&h, &params[*w], &params[*b], *stride, *pad)?.relu()?)
                }
                Layer::MaxPool { name, kernel, stride } => (name, h.max_pool2d(*kernel, *stride)?),
                Layer::Residual { name, a, b, proj, stride } => {
                    let inner = conv_bias(&h, &params[a.0], &params[a.1], *stride, 1)?.relu()?;
                    let inner = conv_bias(&inner, &params[b.0], &params[b.1], 1, 1)?;
                    let skip = match proj {
                        Some((pw, pb)) => conv_bias(&h, &params[*pw], &params[*pb], *stride, 0)?,
                        None => h.clone(),
                    };
                    (name, inner.add(&skip)?.relu()?)
                }
            };
            let out = match intervention {
                Some((target, edit)) if target == name || (target == LAST_CONV && idx == last) => edit(&out)?,
                _ => out,
            };
            maps.insert(name.clone(), out.clone());
            h = out;
        }
        maps.insert(LAST_CONV.to_string(), h.clone());
        let pooled = h.global_avg_pool()?;
        let logits = pooled.linear(&params[self.head.0], &params[self.head.1])?;
        let probabilities = logits.softmax()?;
        Ok(ForwardOutput { logits, probabilities, feature_maps: maps })
    }

    /// Classifier weight matrix `[classes, channels]` of the final linear layer.
    pub fn classifier_weights(&self) -> &Param {
        &self.params[self.head.0]
    }
}
