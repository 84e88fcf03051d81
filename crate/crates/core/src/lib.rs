//! Training and evaluation toolkit for gradient-alignment regularization.
//!
//! A CNN is trained so that its ordinary input gradient agrees with its
//! guided-backpropagation gradient. The crate contains the pieces needed to
//! do that and to measure the effect:
//!
//! - [`tensor`]: dense tensors and a reverse-mode engine whose backward pass
//!   is itself differentiable, with a guided ReLU rule.
//! - [`nn`]: ReLU CNN architectures, initialization and checkpoints.
//! - [`loss`]: cross-entropy, the gradient error functions and the combined
//!   interpretable loss.
//! - [`train`]: SGD with momentum and a step learning-rate schedule.
//! - [`saliency`]: Grad-CAM, Grad-CAM++, Score-CAM, Ablation-CAM, Axiom-CAM
//!   and input-gradient maps.
//! - [`metrics`]: Average Drop / Gain / Increase and insertion / deletion curves.
//! - [`data`]: CIFAR binary parsing, a synthetic shapes dataset, PGM/PPM export.
//! - [`verify`]: the gradient-check suite behind `igrad gradcheck`.

pub mod data;
pub mod error;
pub mod exec;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod saliency;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use exec::Execution;
