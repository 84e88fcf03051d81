use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Description of a ReLU CNN: a chain of spatial blocks followed by global
/// average pooling and one linear layer producing `classes` logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub name: String,
    /// `[channels, height, width]`
    pub input: [usize; 3],
    pub classes: usize,
    pub blocks: Vec<BlockSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlockSpec {
    Conv {
        name: String,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: String,
    },
    MaxPool {
        name: String,
        kernel: usize,
        stride: usize,
    },
    /// `relu(conv₃ₓ₃(relu(conv₃ₓ₃(x))) + shortcut(x))`, with a strided 1×1
    /// projection as shortcut when the shape changes.
    Residual {
        name: String,
        out_channels: usize,
        stride: usize,
        activation: String,
    },
}

impl BlockSpec {
    pub fn name(&self) -> &str {
        match self {
            BlockSpec::Conv { name, .. } | BlockSpec::MaxPool { name, .. } | BlockSpec::Residual { name, .. } => name,
        }
    }

    fn conv(name: &str, out_channels: usize) -> Self {
        BlockSpec::Conv {
            name: name.into(),
            out_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
            activation: "relu".into(),
        }
    }

    fn pool(name: &str) -> Self {
        BlockSpec::MaxPool { name: name.into(), kernel: 2, stride: 2 }
    }
}

impl ArchitectureSpec {
    /// `2 × [conv3×3 → ReLU → maxpool2] → GAP → linear`.
    pub fn tinycnn(input: [usize; 3], classes: usize) -> Self {
        Self::tinycnn_with(input, classes, [8, 16])
    }

    pub fn tinycnn_with(input: [usize; 3], classes: usize, channels: [usize; 2]) -> Self {
        Self {
            name: "tinycnn".into(),
            input,
            classes,
            blocks: vec![
                BlockSpec::conv("conv1", channels[0]),
                BlockSpec::pool("pool1"),
                BlockSpec::conv("conv2", channels[1]),
                BlockSpec::pool("pool2"),
            ],
        }
    }

    /// `stem conv → residual block → strided residual block → GAP → linear`.
    pub fn miniresnet(input: [usize; 3], classes: usize) -> Self {
        Self {
            name: "miniresnet".into(),
            input,
            classes,
            blocks: vec![
                BlockSpec::conv("stem", 8),
                BlockSpec::Residual { name: "res1".into(), out_channels: 8, stride: 1, activation: "relu".into() },
                BlockSpec::Residual { name: "res2".into(), out_channels: 16, stride: 2, activation: "relu".into() },
            ],
        }
    }

    pub fn named(name: &str, input: [usize; 3], classes: usize) -> Result<Self> {
        match name {
            "tinycnn" => Ok(Self::tinycnn(input, classes)),
            "miniresnet" => Ok(Self::miniresnet(input, classes)),
            other => Err(Error::Model(format!("unknown architecture `{other}` (expected tinycnn or miniresnet)"))),
        }
    }

    /// Walks the block chain checking activations and spatial extents.
    /// Returns `[c, h, w]` after every block.
    pub fn shape_chain(&self) -> Result<Vec<[usize; 3]>> {
        let [mut c, mut h, mut w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Model(format!("input shape {:?} has a zero extent", self.input)));
        }
        if self.classes == 0 {
            return Err(Error::Model("class count must be at least 1".into()));
        }
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut names = std::collections::HashSet::new();
        for b in &self.blocks {
            if !names.insert(b.name()) || b.name() == "last_conv" {
                return Err(Error::Model(format!("duplicate or reserved block name `{}`", b.name())));
            }
            let check_act = |a: &str| {
                if a == "relu" {
                    Ok(())
                } else {
                    Err(Error::Model(format!("block `{}`: activation `{a}` is not supported, only relu", b.name())))
                }
            };
            let conv_out = |len: usize, k: usize, s: usize, p: usize| -> Result<usize> {
                if s == 0 || k == 0 || k > len + 2 * p {
                    Err(Error::Model(format!(
                        "block `{}`: kernel {k} / stride {s} / padding {p} do not fit extent {len}",
                        b.name()
                    )))
                } else {
                    Ok((len + 2 * p - k) / s + 1)
                }
            };
            match b {
                BlockSpec::Conv { out_channels, kernel, stride, padding, activation, .. } => {
                    check_act(activation)?;
                    h = conv_out(h, *kernel, *stride, *padding)?;
                    w = conv_out(w, *kernel, *stride, *padding)?;
                    c = *out_channels;
                }
                BlockSpec::MaxPool { kernel, stride, .. } => {
                    h = conv_out(h, *kernel, *stride, 0)?;
                    w = conv_out(w, *kernel, *stride, 0)?;
                }
                BlockSpec::Residual { out_channels, stride, activation, .. } => {
                    check_act(activation)?;
                    h = conv_out(h, 3, *stride, 1)?;
                    w = conv_out(w, 3, *stride, 1)?;
                    c = *out_channels;
                }
            }
            if c == 0 {
                return Err(Error::Model(format!("block `{}` has zero output channels", b.name())));
            }
            out.push([c, h, w]);
        }
        if out.is_empty() {
            return Err(Error::Model("architecture needs at least one spatial block".into()));
        }
        Ok(out)
    }
}
