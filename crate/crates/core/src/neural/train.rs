//! Mini-batch SGD with per-epoch reshuffling, random-crop augmentation and a
//! plateau learning-rate schedule.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::model::{batch_tensor, Architecture, ModelParams, CLASSES};
use super::optim::{clip_grad_norm, sgd_step, Sgd};
use super::tensor::Tensor;
use crate::dsp::{crop_at, SpecExample};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, derived_rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs without a validation-loss improvement before the rate drops.
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub lr_decay: f64,
    /// Fraction of the training examples held out for the plateau schedule.
    pub val_fraction: f64,
    /// Random-crop padding in frames; 0 disables cropping.
    pub crop_pad: usize,
    /// Joint L2 norm cap on the weight gradients; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            batch_size: 64,
            weight_decay: 1e-4,
            epochs: 20,
            plateau_patience: 3,
            plateau_min_delta: 1e-3,
            lr_decay: 0.1,
            val_fraction: 0.1,
            crop_pad: 8,
            grad_clip: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates_ok = [self.learning_rate, self.lr_decay].iter().all(|r| r.is_finite() && *r > 0.0)
            && self.momentum.is_finite()
            && self.momentum >= 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0
            && self.plateau_min_delta >= 0.0
            && self.grad_clip.is_finite()
            && self.grad_clip >= 0.0;
        if !rates_ok {
            return Err(Error::InvalidParam(format!("training rates must be positive: {self:?}")));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidParam(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    pub fn sgd(&self, learning_rate: f64) -> Sgd {
        Sgd {
            learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "epoch,learning_rate,train_loss,train_accuracy,val_loss,val_accuracy")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.epoch,
                r.learning_rate,
                r.train_loss,
                r.train_accuracy,
                opt(r.val_loss),
                opt(r.val_accuracy)
            )?;
        }
        Ok(())
    }
}

/// Class targets for one example, in the order the loss expects.
pub fn targets(arch: &Architecture, ex: &SpecExample) -> Result<Vec<usize>> {
    if arch.is_segmenter() {
        if ex.frame_labels.len() != arch.frames() {
            return Err(Error::Shape(format!(
                "{} frame labels for a {}-frame segmenter",
                ex.frame_labels.len(),
                arch.frames()
            )));
        }
        Ok(ex.frame_labels.iter().map(|&l| usize::from(l)).collect())
    } else {
        Ok(vec![usize::from(ex.label)])
    }
}

/// Loss and probabilities from one batch.
pub struct BatchOutput {
    pub loss: f64,
    pub probs: Vec<f32>,
}

/// What changes between plain classifier training and joint allocation
/// training: the update step and how held-out batches are scored.
pub trait Objective {
    fn step(&mut self, model: &mut ModelParams<f32>, x: &Tensor<f32>, labels: &[usize], lr: f64, step: u64)
        -> Result<BatchOutput>;

    fn evaluate(&mut self, model: &ModelParams<f32>, x: &Tensor<f32>, labels: &[usize]) -> Result<BatchOutput>;

    fn end_epoch(&mut self, _model: &ModelParams<f32>, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

/// Ordinary cross-entropy training.
pub struct CrossEntropy {
    pub cfg: TrainConfig,
}

impl Objective for CrossEntropy {
    fn step(&mut self, model: &mut ModelParams<f32>, x: &Tensor<f32>, labels: &[usize], lr: f64, _: u64)
        -> Result<BatchOutput> {
        let mut b = model.backward(x, labels)?;
        if self.cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut b.grads, self.cfg.grad_clip);
        }
        sgd_step(model, &b.grads, &self.cfg.sgd(lr))?;
        Ok(BatchOutput {
            loss: b.loss,
            probs: b.probs,
        })
    }

    fn evaluate(&mut self, model: &ModelParams<f32>, x: &Tensor<f32>, labels: &[usize]) -> Result<BatchOutput> {
        let probs = model.forward(x)?.data;
        Ok(BatchOutput {
            loss: mean_cross_entropy(&probs, labels, model.arch.labels_per_example()),
            probs,
        })
    }
}

pub fn mean_cross_entropy(probs: &[f32], labels: &[usize], plane: usize) -> f64 {
    let mut total = 0.0;
    for (j, &label) in labels.iter().enumerate() {
        let (i, q) = (j / plane, j % plane);
        let p = f64::from(probs[(i * CLASSES + label) * plane + q]).max(f64::MIN_POSITIVE);
        total -= p.ln();
    }
    total / labels.len() as f64
}

/// Held-out indices carved from the training examples.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derived_rng(seed, "validation"));
    let n_val = ((n as f64) * fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let val = idx.split_off(n - n_val);
    (idx, val)
}

pub fn train_classifier(arch: Architecture, data: &[SpecExample], cfg: &TrainConfig) -> Result<(ModelParams<f32>, History)> {
    let model = ModelParams::init(arch, derive_seed(cfg.seed, "init"))?;
    let mut obj = CrossEntropy { cfg: *cfg };
    fit(model, data, cfg, &mut obj)
}

/// Runs the epoch loop for any objective.
pub fn fit(
    mut model: ModelParams<f32>,
    data: &[SpecExample],
    cfg: &TrainConfig,
    obj: &mut dyn Objective,
) -> Result<(ModelParams<f32>, History)> {
    cfg.validate()?;
    model.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training split has no examples".into()));
    }
    let arch = model.arch;
    let plane = arch.labels_per_example();
    let crop = if arch.is_segmenter() { 0 } else { cfg.crop_pad };
    let labels: Vec<Vec<usize>> = data.iter().map(|e| targets(&arch, e)).collect::<Result<_>>()?;
    let (train_idx, val_idx) = validation_split(data.len(), cfg.val_fraction, cfg.seed);

    let mut lr = cfg.learning_rate;
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut history = History::default();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut derived_rng(cfg.seed, &format!("epoch/{epoch}")));
        let mut crop_rng = derived_rng(cfg.seed, &format!("crop/{epoch}"));
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let cropped: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    if crop == 0 {
                        Ok(data[i].spec.clone())
                    } else {
                        crop_at(&data[i].spec, crop, crop_rng.gen_range(0..=2 * crop))
                    }
                })
                .collect::<Result<_>>()?;
            let refs: Vec<_> = cropped.iter().collect();
            let x = batch_tensor::<f32>(&refs)?;
            let y: Vec<usize> = chunk.iter().flat_map(|&i| labels[i].iter().copied()).collect();
            let out = obj.step(&mut model, &x, &y, lr, step)?;
            step += 1;
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            loss_sum += out.loss * y.len() as f64;
            correct += count_correct_in(&out.probs, &y, plane);
            seen += y.len();
        }
        let train_loss = loss_sum / seen as f64;
        let (val_loss, val_accuracy) = if val_idx.is_empty() {
            (None, None)
        } else {
            let (l, a) = score(&model, data, &labels, &val_idx, plane, obj)?;
            (Some(l), Some(a))
        };
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss,
            train_accuracy: correct as f64 / seen as f64,
            val_loss,
            val_accuracy,
        };
        obj.end_epoch(&model, &record)?;
        history.records.push(record);

        let monitored = val_loss.unwrap_or(train_loss);
        if monitored < best - cfg.plateau_min_delta {
            best = monitored;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.plateau_patience {
                lr *= cfg.lr_decay;
                stale = 0;
            }
        }
    }
    Ok((model, history))
}

fn score(
    model: &ModelParams<f32>,
    data: &[SpecExample],
    labels: &[Vec<usize>],
    idx: &[usize],
    plane: usize,
    obj: &mut dyn Objective,
) -> Result<(f64, f64)> {
    let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
    for chunk in idx.chunks(64) {
        let refs: Vec<_> = chunk.iter().map(|&i| &data[i].spec).collect();
        let x = batch_tensor::<f32>(&refs)?;
        let y: Vec<usize> = chunk.iter().flat_map(|&i| labels[i].iter().copied()).collect();
        let out = obj.evaluate(model, &x, &y)?;
        loss_sum += out.loss * y.len() as f64;
        correct += count_correct_in(&out.probs, &y, plane);
        seen += y.len();
    }
    Ok((loss_sum / seen as f64, correct as f64 / seen as f64))
}

/// Positions whose call probability lands on the right side of 0.5.
/// `probs` is `[batch, 2, plane]`, `labels` is `[batch, plane]`.
pub fn count_correct_in(probs: &[f32], labels: &[usize], plane: usize) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(j, &label)| {
            let (i, q) = (j / plane, j % plane);
            usize::from(probs[(i * CLASSES + 1) * plane + q] > 0.5) == label
        })
        .count()
}
