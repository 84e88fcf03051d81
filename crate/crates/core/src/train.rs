//! SGD with momentum on the interpretable loss, a step learning-rate
//! schedule, accuracy evaluation and a per-epoch log.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::loss::{input_gradient, interpretable_loss, ErrorFnKind, LossBreakdown, DEFAULT_LAMBDA};
use crate::nn::{save_checkpoint, Model};
use crate::tensor::{backward, BackwardOptions, GradMode, Tape, Tensor};

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_augment_pad() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epochs after which the learning rate is divided by `lr_decay_factor`.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub lambda: f64,
    pub error_fn: ErrorFnKind,
    pub seed: u64,
    /// Random crop (zero padded) and horizontal flip.
    #[serde(default)]
    pub augment: bool,
    #[serde(default = "default_augment_pad")]
    pub augment_pad: usize,
    /// Save a checkpoint every this many epochs (the final epoch is always saved).
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl TrainConfig {
    /// The full-scale CIFAR recipe: 200 epochs, batch 128, lr 0.1 divided
    /// by 5 after epochs 60, 120 and 160.
    pub fn reference_recipe() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            base_lr: 0.1,
            lr_decay_epochs: vec![60, 120, 160],
            lr_decay_factor: 5.0,
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            lambda: DEFAULT_LAMBDA,
            error_fn: ErrorFnKind::Cosine,
            seed: 0,
            augment: true,
            augment_pad: 4,
            checkpoint_every: None,
        }
    }

    /// Scaled-down recipe for small models on a single machine.
    pub fn desk_default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            base_lr: 0.05,
            lr_decay_epochs: vec![15, 22],
            lr_decay_factor: 5.0,
            augment: false,
            ..Self::reference_recipe()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return bad(format!("train.base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.lr_decay_factor > 0.0) || !self.lr_decay_factor.is_finite() {
            return bad(format!("train.lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("train.momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("train.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("train.lambda must be >= 0, got {}", self.lambda));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad("train.lr_decay_epochs must be strictly increasing".into());
        }
        if self.checkpoint_every == Some(0) {
            return bad("train.checkpoint_every must be at least 1".into());
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (1-indexed): the base rate divided by
    /// the factor once for every listed epoch already completed.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs.iter().filter(|&&d| epoch > d).count();
        self.base_lr / self.lr_decay_factor.powi(drops as i32)
    }
}

/// SGD with momentum and L2 weight decay:
/// `g = ∇ + wd·θ; v = μ·v + g; θ = θ − lr·v`.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, model: &mut Model, grads: &[Tensor], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        let params = model.params_mut();
        if grads.len() != params.len() {
            return Err(Error::Model(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if g.data().len() != p.data.len() {
                return Err(Error::Model(format!("gradient for `{}` has the wrong size", p.name)));
            }
            for ((theta, &gi), vi) in p.data.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let g = gi + weight_decay * *theta;
                *vi = momentum * *vi + g;
                *theta -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepResult {
    pub loss: LossBreakdown,
    /// Correct predictions in the batch before the update.
    pub correct: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(logits: &Tensor, targets: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits.data().chunks(c).zip(targets).filter(|(row, &t)| argmax(row) == t).count()
}

/// One SGD step on a normalized batch.
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    x: &Tensor,
    targets: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    epoch: usize,
    step: usize,
) -> Result<StepResult> {
    let tape = Tape::new();
    let params = model.bind(&tape);
    let xl = tape.leaf(x);
    let il = interpretable_loss(model, &params, &xl, targets, cfg.error_fn, cfg.lambda)?;
    if !il.breakdown.is_finite() {
        return Err(Error::Divergence { epoch, step, value: il.breakdown.total });
    }
    let refs: Vec<&Tensor> = params.iter().collect();
    let grads = backward(&il.total, &refs, BackwardOptions::standard())?;
    if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::Divergence { epoch, step, value: f64::NAN });
    }
    let correct = count_correct(&il.logits, targets);
    opt.step(model, &grads, lr, cfg.momentum, cfg.weight_decay)?;
    Ok(StepResult { loss: il.breakdown, correct })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_c: f64,
    pub loss_r: f64,
    pub loss_total: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,lr,loss_c,loss_r,loss_total,train_acc,test_acc,seconds";

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        if self.records.is_empty() {
            w.write_record(Self::HEADER.split(','))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| EpochRecord { seconds: 0.0, ..a.clone() } == EpochRecord { seconds: 0.0, ..b.clone() })
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Where checkpoints are written, if anywhere.
    pub checkpoint: Option<PathBuf>,
    pub exec: Execution,
    /// Skip the held-out accuracy after each epoch (reported as NaN).
    pub skip_test_eval: bool,
}

/// Trains `model` for `cfg.epochs` epochs. Shuffling and augmentation are
/// driven by `cfg.seed`, so identical inputs give identical logs.
pub fn fit(model: &mut Model, train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig, opts: &FitOptions) -> Result<TrainLog> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut lc, mut lr_sum, mut total, mut correct) = (0.0, 0.0, 0.0, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, t) = if cfg.augment {
                train.augmented_batch(idx, cfg.augment_pad, &mut rng)?
            } else {
                train.batch(idx)?
            };
            let r = train_step(model, &mut opt, &x, &t, cfg, lr, epoch, step)?;
            let w = idx.len() as f64;
            lc += r.loss.classification * w;
            lr_sum += r.loss.regularization * w;
            total += r.loss.total * w;
            correct += r.correct;
        }
        let n = train.len() as f64;
        let test_acc = match test {
            Some(t) if !opts.skip_test_eval => evaluate_accuracy(model, t, opts.exec)?,
            _ => f64::NAN,
        };
        let rec = EpochRecord {
            epoch,
            lr,
            loss_c: lc / n,
            loss_r: lr_sum / n,
            loss_total: total / n,
            train_acc: correct as f64 / n,
            test_acc,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}/{} lr {lr:.2e} loss_c {:.4} loss_r {:.4} train_acc {:.4} test_acc {:.4}",
            cfg.epochs,
            rec.loss_c,
            rec.loss_r,
            rec.train_acc,
            rec.test_acc
        );
        log.records.push(rec);
        if let Some(path) = &opts.checkpoint {
            if epoch == cfg.epochs || cfg.checkpoint_every.is_some_and(|k| epoch % k == 0) {
                save_checkpoint(model, path)?;
            }
        }
    }
    Ok(log)
}

/// Fraction of `dataset` classified correctly (argmax, ties to the lowest class).
pub fn evaluate_accuracy(model: &Model, dataset: &Dataset, exec: Execution) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("cannot evaluate accuracy on an empty split".into()));
    }
    const CHUNK: usize = 64;
    let chunks = dataset.len().div_ceil(CHUNK);
    let counts = map_indexed(chunks, exec, |b| -> Result<usize> {
        let idx: Vec<usize> = (b * CHUNK..((b + 1) * CHUNK).min(dataset.len())).collect();
        let (x, t) = dataset.batch(&idx)?;
        Ok(count_correct(&model.forward(&x)?.logits, &t))
    });
    let mut correct = 0;
    for c in counts {
        correct += c?;
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Mean cosine similarity between the standard and guided input gradients
/// of each example's own classification loss. Examples where either gradient
/// vanishes are skipped.
pub fn gradient_alignment(model: &Model, dataset: &Dataset, exec: Execution) -> Result<f64> {
    let per = map_indexed(dataset.len(), exec, |i| -> Result<Option<f64>> {
        let (x, t) = dataset.batch(&[i])?;
        let s = input_gradient(model, &x, &t, GradMode::Standard)?;
        let g = input_gradient(model, &x, &t, GradMode::Guided)?;
        let dot: f64 = s.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let ns: f64 = s.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let ng: f64 = g.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        Ok((ns >= crate::loss::NORM_GUARD && ng >= crate::loss::NORM_GUARD).then(|| dot / (ns * ng)))
    });
    let (mut sum, mut count) = (0.0, 0usize);
    for v in per {
        if let Some(c) = v? {
            sum += c;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Metrics("no example has a non-vanishing input gradient".into()));
    }
    Ok(sum / count as f64)
}
