//! AdamW with a per-step cosine schedule, seeded shuffling and augmentation,
//! validation AUROC per epoch and best-checkpoint selection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Dataset, LabeledSample, Split};
use crate::error::{Error, Result};
use crate::metrics::auroc;
use crate::model::{checkpoint, decays, BiMamba, ModelParams};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Linear warmup steps before the cosine decay; zero disables it.
    pub warmup_steps: usize,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 5e-6,
            weight_decay: 1e-8,
            batch_size: 24,
            epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            warmup_steps: 0,
            clip_norm: None,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init >= 0.0 && self.lr_init.is_finite()) {
            return Err(Error::Config(format!("lr_init must be a finite non-negative number, got {}", self.lr_init)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("eps must be positive and weight_decay non-negative".into()));
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// `lr_init · ½ · (1 + cos(π · step / total))`, with an optional linear
/// warmup over the first `warmup` steps.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64) -> f64 {
    if total_steps == 0 {
        return lr_init;
    }
    let s = step.min(total_steps) as f64;
    lr_init * 0.5 * (1.0 + (std::f64::consts::PI * s / total_steps as f64).cos())
}

pub fn scheduled_lr(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let base = cosine_lr(step, total_steps, config.lr_init);
    if step < config.warmup_steps {
        base * (step + 1) as f64 / config.warmup_steps as f64
    } else {
        base
    }
}

/// First and second moment estimates for every parameter, in visit order.
#[derive(Clone, Debug)]
pub struct AdamState<T: Element> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of steps taken so far.
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let mut m = Vec::new();
        params.visit(|_, p| m.push(Tensor::zeros(p.shape()).expect("existing shape")));
        AdamState { v: m.clone(), m, t: 0 }
    }
}

/// Hyperparameters of one AdamW update.
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// AdamW on one tensor at step `t ≥ 1`: decoupled decay `θ ← θ − lr·wd·θ`,
/// then `θ ← θ − lr · m̂ / (√v̂ + ε)` with bias-corrected moments.
pub fn adamw_update<T: Element>(
    theta: &mut Tensor<T>,
    grad: &Tensor<T>,
    m: &mut Tensor<T>,
    v: &mut Tensor<T>,
    t: u64,
    opt: AdamW,
    decay: bool,
) {
    let c1 = 1.0 - opt.beta1.powi(t as i32);
    let c2 = 1.0 - opt.beta2.powi(t as i32);
    let shrink = if decay { 1.0 - opt.lr * opt.weight_decay } else { 1.0 };
    let (th, g, mm, vv) = (theta.data_mut(), grad.data(), m.data_mut(), v.data_mut());
    for i in 0..th.len() {
        let gi = g[i].to_f64();
        let mi = opt.beta1 * mm[i].to_f64() + (1.0 - opt.beta1) * gi;
        let vi = opt.beta2 * vv[i].to_f64() + (1.0 - opt.beta2) * gi * gi;
        mm[i] = T::from_f64(mi);
        vv[i] = T::from_f64(vi);
        let step = opt.lr * (mi / c1) / ((vi / c2).sqrt() + opt.eps);
        th[i] = T::from_f64(th[i].to_f64() * shrink - step);
    }
}

/// One AdamW step over every parameter. Norm gains, biases and the cls and
/// positional embeddings are not decayed.
pub fn adamw_step<T: Element>(params: &mut ModelParams<T>, grads: &ModelParams<T>, state: &mut AdamState<T>, opt: AdamW) {
    state.t += 1;
    let t = state.t;
    let mut gs = Vec::new();
    grads.visit(|_, g| gs.push(g));
    let mut k = 0;
    params.visit_mut(|name, theta| {
        adamw_update(theta, gs[k], &mut state.m[k], &mut state.v[k], t, opt, decays(&name));
        k += 1;
    });
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
    pub lr: f64,
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Predicted probabilities for each sample, in order.
pub fn predict<T: Element>(model: &BiMamba<T>, samples: &[&LabeledSample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| model.predict(&s.frontal.cast(), &s.lateral.cast()))
        .collect()
}

pub fn evaluate_auroc<T: Element>(model: &BiMamba<T>, samples: &[&LabeledSample]) -> Result<f64> {
    let scores = predict(model, samples)?;
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    auroc(&scores, &labels)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    pub best: BiMamba<f32>,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
}

fn global_norm(g: &ModelParams<f32>) -> f64 {
    let mut s = 0.0;
    g.visit(|_, t| s += t.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>());
    s.sqrt()
}

/// Train `model` in place. After each epoch the validation AUROC is computed;
/// the best model so far is kept and, when `checkpoint_path` is given,
/// written there. `on_epoch` sees each history row as it is produced.
pub fn train_loop(
    model: &mut BiMamba<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
    checkpoint_path: Option<&Path>,
    mut on_epoch: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::InsufficientData(format!(
            "need non-empty train and val splits, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut state = AdamState::new(&model.params);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(BiMamba<f32>, usize, f64)> = None;
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut lr = config.lr_init;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut grads = model.params.zeros_like();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let sample = if config.augment {
                    augment(train[i], &mut rng)
                } else {
                    train[i].clone()
                };
                let diverged = Error::NonFiniteLoss { epoch, batch: b };
                let (loss, g) = match model.loss_and_gradients(&sample.frontal, &sample.lateral, sample.label) {
                    Err(e) if e.is_numerical() => return Err(diverged),
                    r => r?,
                };
                let loss = loss as f64;
                if !loss.is_finite() {
                    return Err(diverged);
                }
                batch_loss += loss;
                grads.zip_mut(&g, |_, acc, gi| {
                    acc.data_mut().iter_mut().zip(gi.data()).for_each(|(a, &v)| *a += v);
                });
            }
            let mut scale = 1.0 / chunk.len() as f64;
            if let Some(c) = config.clip_norm {
                let norm = global_norm(&grads) * scale;
                if norm > c {
                    scale *= c / norm;
                }
            }
            grads.visit_mut(|_, t| t.data_mut().iter_mut().for_each(|v| *v *= scale as f32));
            lr = scheduled_lr(step, total_steps, config);
            let opt = AdamW {
                lr,
                beta1: config.beta1,
                beta2: config.beta2,
                eps: config.eps,
                weight_decay: config.weight_decay,
            };
            adamw_step(&mut model.params, &grads, &mut state, opt);
            step += 1;
            loss_sum += batch_loss;
        }

        let val_auroc = evaluate_auroc(model, &val)?;
        let row = HistoryRow {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_auroc,
            lr,
        };
        on_epoch(&row);
        history.push(row);
        if best.as_ref().is_none_or(|(_, _, a)| val_auroc > *a) {
            if let Some(path) = checkpoint_path {
                checkpoint::save(model, path)?;
            }
            best = Some((model.clone(), epoch, val_auroc));
        }
    }

    let (best, best_epoch, best_val_auroc) = match best {
        Some(b) => b,
        None => {
            if let Some(path) = checkpoint_path {
                checkpoint::save(model, path)?;
            }
            (model.clone(), 0, evaluate_auroc(model, &val)?)
        }
    };
    Ok(TrainOutcome {
        history,
        best,
        best_epoch,
        best_val_auroc,
    })
}
