//! Learned per-band bit allocation.
//!
//! Truncating band `f` to fewer bits adds quantization error; during training
//! that error is replaced by Gaussian noise `exp(-lambda[f]) * beta`, which is
//! differentiable in `lambda`. The classifier and `lambda` are trained
//! together on `cross_entropy + mu * sum(lambda)`, and the learned `lambda` is
//! turned into integer bit widths proportionally.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};

use crate::codec::{proportional_plan, AllocMethod, AllocationPlan};
use crate::dsp::{SpecExample, Spectrogram};
use crate::error::{Error, Result};
use crate::neural::model::{batch_tensor, ModelParams};
use crate::neural::optim::{clip_grad_norm, sgd_step, sgd_update, Sgd};
use crate::neural::tape::Tape;
use crate::neural::tensor::{Real, Tensor};
use crate::neural::train::{fit, mean_cross_entropy, BatchOutput, EpochRecord, Objective, TrainConfig};
use crate::neural::Architecture;
use crate::rng::{derive_seed, rng_from_seed};

/// Guard added to the shifted weights so a flat vector still apportions.
pub const WEIGHT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct AllocTrainConfig {
    pub mu: f64,
    pub lambda_init: f64,
    pub train: TrainConfig,
}

impl Default for AllocTrainConfig {
    fn default() -> Self {
        Self {
            mu: 1e-7,
            lambda_init: 2.0,
            train: TrainConfig::default(),
        }
    }
}

impl AllocTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidParam(format!("mu must be non-negative, got {}", self.mu)));
        }
        if !self.lambda_init.is_finite() {
            return Err(Error::InvalidParam("lambda_init must be finite".into()));
        }
        self.train.validate()
    }
}

/// `n` standard-normal draws from `seed`.
pub fn standard_normal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `x_hat[t, f] + exp(-lam[f]) * beta[t, f]` with a fresh draw of `beta`.
pub fn noise_channel(x_hat: &Spectrogram, lam: &[f64], seed: u64) -> Result<Spectrogram> {
    if lam.len() != x_hat.bands {
        return Err(Error::Shape(format!("{} lambdas for {} bands", lam.len(), x_hat.bands)));
    }
    let beta = standard_normal(x_hat.data.len(), seed);
    let scale: Vec<f64> = lam.iter().map(|l| (-l).exp()).collect();
    let data = x_hat
        .data
        .iter()
        .zip(&beta)
        .enumerate()
        .map(|(i, (x, b))| x + scale[i % x_hat.bands] * b)
        .collect();
    Ok(Spectrogram::new(x_hat.frames, x_hat.bands, data)?.with_axes_from(x_hat))
}

/// Joint loss and its gradients.
pub struct JointLoss<T> {
    pub loss: f64,
    pub class_loss: f64,
    pub penalty: f64,
    pub param_grads: std::collections::BTreeMap<String, Vec<T>>,
    pub lambda_grad: Vec<T>,
    /// Gradient of the classification term with respect to the noised input.
    pub input_grad: Vec<T>,
    pub probs: Vec<T>,
}

/// Cross-entropy of the classifier on `x + exp(-lam) * beta` plus
/// `mu * sum(lam)`, with `beta` given explicitly.
pub fn joint_loss_with_noise<T: Real>(
    model: &ModelParams<T>,
    lam: &[T],
    x: &Tensor<T>,
    labels: &[usize],
    mu: f64,
    beta: Vec<T>,
) -> Result<JointLoss<T>> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let xv = tape.leaf(x.clone(), false);
    let lv = tape.leaf(Tensor::new(vec![lam.len()], lam.to_vec())?, true);
    let noised = tape.noise_channel(xv, lv, beta)?;
    let logits = model.arch.logits(&mut tape, &params, noised)?;
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    let mut g = tape.backward(ce)?;
    let class_loss = tape.value(ce).data[0].as_f64();
    let penalty = mu * lam.iter().map(|l| l.as_f64()).sum::<f64>();
    let mut lambda_grad = g.take(lv).unwrap_or_else(|| vec![T::zero(); lam.len()]);
    lambda_grad.iter_mut().for_each(|d| *d += T::of(mu));
    let param_grads = params
        .iter()
        .map(|(k, &v)| (k.clone(), g.take(v).unwrap_or_else(|| vec![T::zero(); model.params[k].len()])))
        .collect();
    Ok(JointLoss {
        loss: class_loss + penalty,
        class_loss,
        penalty,
        param_grads,
        lambda_grad,
        input_grad: g.take(noised).unwrap_or_else(|| vec![T::zero(); x.len()]),
        probs: tape.probabilities(ce).map(<[T]>::to_vec).unwrap_or_default(),
    })
}

/// [`joint_loss_with_noise`] with `beta` drawn from `seed`.
pub fn joint_loss<T: Real>(
    model: &ModelParams<T>,
    lam: &[T],
    x: &Tensor<T>,
    labels: &[usize],
    mu: f64,
    seed: u64,
) -> Result<JointLoss<T>> {
    let beta = standard_normal(x.len(), seed).into_iter().map(T::of).collect();
    joint_loss_with_noise(model, lam, x, labels, mu, beta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocEpoch {
    pub record: EpochRecord,
    /// `mu * sum(lambda)` at the end of the epoch.
    pub penalty: f64,
    pub lambda_mean: f64,
    pub lambda_sum: f64,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocHistory {
    /// Classification loss on noised training data before any update.
    pub initial_class_loss: f64,
    pub initial_lambda: Vec<f64>,
    pub epochs: Vec<AllocEpoch>,
}

impl AllocHistory {
    /// Per-epoch classification loss, led by the pre-training value.
    pub fn class_losses(&self) -> Vec<f64> {
        std::iter::once(self.initial_class_loss)
            .chain(self.epochs.iter().map(|e| e.record.train_loss))
            .collect()
    }

    pub fn lambda_sums(&self) -> Vec<f64> {
        std::iter::once(self.initial_lambda.iter().sum())
            .chain(self.epochs.iter().map(|e| e.lambda_sum))
            .collect()
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "epoch,learning_rate,class_loss,penalty,lambda_mean,lambda_sum,train_accuracy,val_loss")?;
        let n = self.initial_lambda.len().max(1) as f64;
        let s: f64 = self.initial_lambda.iter().sum();
        writeln!(w, "0,,{},,{},{},,", self.initial_class_loss, s / n, s)?;
        for e in &self.epochs {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                e.record.epoch + 1,
                e.record.learning_rate,
                e.record.train_loss,
                e.penalty,
                e.lambda_mean,
                e.lambda_sum,
                e.record.train_accuracy,
                e.record.val_loss.map(|v| v.to_string()).unwrap_or_default()
            )?;
        }
        Ok(())
    }
}

struct JointObjective {
    lam: Vec<f32>,
    velocity: Vec<f32>,
    mu: f64,
    cfg: TrainConfig,
    val_batch: u64,
    epochs: Vec<AllocEpoch>,
}

impl Objective for JointObjective {
    fn step(&mut self, model: &mut ModelParams<f32>, x: &Tensor<f32>, labels: &[usize], lr: f64, step: u64)
        -> Result<BatchOutput> {
        let seed = derive_seed(self.cfg.seed, &format!("noise/{step}"));
        let mut j = joint_loss(model, &self.lam, x, labels, self.mu, seed)?;
        if self.cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut j.param_grads, self.cfg.grad_clip);
        }
        sgd_step(model, &j.param_grads, &self.cfg.sgd(lr))?;
        let opt = Sgd {
            learning_rate: lr,
            momentum: self.cfg.momentum,
            weight_decay: 0.0,
        };
        sgd_update(&mut self.lam, &mut self.velocity, &j.lambda_grad, &opt);
        if self.lam.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite(format!("lambda after step {step}")));
        }
        Ok(BatchOutput {
            loss: j.class_loss,
            probs: j.probs,
        })
    }

    fn evaluate(&mut self, model: &ModelParams<f32>, x: &Tensor<f32>, labels: &[usize]) -> Result<BatchOutput> {
        // the same noise every epoch keeps validation losses comparable
        let seed = derive_seed(self.cfg.seed, &format!("val-noise/{}", self.val_batch));
        self.val_batch += 1;
        let probs = noised_probs(model, &self.lam, x, seed)?;
        Ok(BatchOutput {
            loss: mean_cross_entropy(&probs, labels, model.arch.labels_per_example()),
            probs,
        })
    }

    fn end_epoch(&mut self, _model: &ModelParams<f32>, record: &EpochRecord) -> Result<()> {
        self.val_batch = 0;
        let lambda: Vec<f64> = self.lam.iter().map(|&l| f64::from(l)).collect();
        let sum: f64 = lambda.iter().sum();
        self.epochs.push(AllocEpoch {
            record: *record,
            penalty: self.mu * sum,
            lambda_mean: sum / lambda.len() as f64,
            lambda_sum: sum,
            lambda,
        });
        Ok(())
    }
}

fn noised_probs(model: &ModelParams<f32>, lam: &[f32], x: &Tensor<f32>, seed: u64) -> Result<Vec<f32>> {
    let w = lam.len();
    let beta = standard_normal(x.len(), seed);
    let mut noised = x.clone();
    for (i, (v, b)) in noised.data.iter_mut().zip(beta).enumerate() {
        *v += (-lam[i % w]).exp() * b as f32;
    }
    Ok(model.forward(&noised)?.data)
}

/// Mean cross-entropy over `data` with fresh noise per chunk and no updates.
fn noised_loss(model: &ModelParams<f32>, lam: &[f32], data: &[SpecExample], seed: u64) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for (i, chunk) in data.chunks(64).enumerate() {
        let refs: Vec<&Spectrogram> = chunk.iter().map(|e| &e.spec).collect();
        let x = batch_tensor::<f32>(&refs)?;
        let labels: Vec<usize> = chunk
            .iter()
            .map(|e| crate::neural::train::targets(&model.arch, e))
            .collect::<Result<Vec<_>>>()?
            .concat();
        let probs = noised_probs(model, lam, &x, derive_seed(seed, &format!("initial-noise/{i}")))?;
        total += mean_cross_entropy(&probs, &labels, model.arch.labels_per_example()) * labels.len() as f64;
        count += labels.len();
    }
    Ok(total / count as f64)
}

/// Trains `lambda` and a classifier jointly. `warm_start` replaces the
/// freshly initialized classifier.
pub fn train_allocation(
    arch: Architecture,
    data: &[SpecExample],
    cfg: &AllocTrainConfig,
    warm_start: Option<ModelParams<f32>>,
) -> Result<(Vec<f64>, ModelParams<f32>, AllocHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training split has no examples".into()));
    }
    let model = match warm_start {
        Some(m) if m.arch == arch => m,
        Some(m) => {
            return Err(Error::InvalidParam(format!(
                "warm start is a {} but training a {arch}",
                m.arch
            )))
        }
        None => ModelParams::init(arch, derive_seed(cfg.train.seed, "init"))?,
    };
    let bands = arch.bands();
    let lam = vec![cfg.lambda_init as f32; bands];
    let initial_class_loss = noised_loss(&model, &lam, data, cfg.train.seed)?;
    let mut obj = JointObjective {
        velocity: vec![0.0; bands],
        lam,
        mu: cfg.mu,
        cfg: cfg.train,
        val_batch: 0,
        epochs: Vec::new(),
    };
    let (model, _) = fit(model, data, &cfg.train, &mut obj)?;
    let lambda: Vec<f64> = obj.lam.iter().map(|&l| f64::from(l)).collect();
    let history = AllocHistory {
        initial_class_loss,
        initial_lambda: vec![cfg.lambda_init; bands],
        epochs: obj.epochs,
    };
    Ok((lambda, model, history))
}

/// Floor bits everywhere, the rest proportional to `lam - min(lam)`.
pub fn lambda_to_allocation(lam: &[f64], budget: u32, floor: u8) -> Result<AllocationPlan> {
    if lam.is_empty() {
        return Err(Error::Empty("lambda has no bands".into()));
    }
    if lam.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("lambda".into()));
    }
    let min = lam.iter().copied().fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = lam.iter().map(|l| (l - min).max(0.0) + WEIGHT_EPSILON).collect();
    proportional_plan(&weights, budget, floor, AllocMethod::Learned, Some(lam.to_vec()))
}

/// CSV with one row per band: index, centre frequency, lambda, and the bits
/// the band receives at each budget.
pub fn write_lambda_csv(
    w: &mut impl Write,
    lam: &[f64],
    band_freqs_hz: &[f64],
    budgets: &[u32],
    floor: u8,
) -> Result<()> {
    if lam.len() != band_freqs_hz.len() {
        return Err(Error::Shape(format!("{} lambdas for {} bands", lam.len(), band_freqs_hz.len())));
    }
    let plans = budgets
        .iter()
        .map(|&b| lambda_to_allocation(lam, b, floor))
        .collect::<Result<Vec<_>>>()?;
    write!(w, "band_index,center_freq_hz,lambda")?;
    for b in budgets {
        write!(w, ",bits_at_{b}")?;
    }
    writeln!(w)?;
    for (i, (l, f)) in lam.iter().zip(band_freqs_hz).enumerate() {
        write!(w, "{i},{f},{l}")?;
        for p in &plans {
            write!(w, ",{}", p.bits[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Reads the band index and lambda columns back from [`write_lambda_csv`].
/// Lines starting with `#` are comments.
pub fn read_lambda_csv(text: &str) -> Result<Vec<f64>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| Error::Empty("lambda CSV is empty".into()))?;
    if !header.starts_with("band_index,center_freq_hz,lambda") {
        return Err(Error::InvalidParam(format!("unexpected lambda CSV header {header:?}")));
    }
    let mut out = Vec::new();
    for (row, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        let idx: usize = cols
            .first()
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| Error::InvalidParam(format!("bad band index on row {row}")))?;
        if idx != row {
            return Err(Error::InvalidParam(format!("band index {idx} on row {row}")));
        }
        let l: f64 = cols
            .get(2)
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| Error::InvalidParam(format!("bad lambda on row {row}")))?;
        out.push(l);
    }
    if out.is_empty() {
        return Err(Error::Empty("lambda CSV has no rows".into()));
    }
    Ok(out)
}
