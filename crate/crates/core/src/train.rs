//! Frozen-backbone training: AdamW over trainable buffers with a linear
//! warm-up and linear decay, plus dataset evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mode;
use crate::data::{batch_iter, Dataset, Sample, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::model::StitchModel;
use crate::nn::{Ctx, Parameterized};
use crate::tensor::{derive_seed, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_epochs: f64,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Evaluate every this many epochs when an eval set is given; 0 only
    /// evaluates after the last epoch.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 6e-5,
            warmup_epochs: 10.0,
            decay_factor: 0.01,
            epochs: 30,
            batch_size: 8,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return err(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs <= self.epochs as f64) {
            return err(format!("warmup_epochs {} must lie in [0, epochs={}]", self.warmup_epochs, self.epochs));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return err("epochs and batch_size must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return err(format!("base_lr must be finite and non-negative, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return err("betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.weight_decay < 0.0 {
            return err("weight_decay must be non-negative".into());
        }
        Ok(())
    }
}

/// Learning rate at fractional epoch `t`: linear ramp from 0 over the
/// warm-up, then linear decay to `base_lr * decay_factor` at the last epoch.
pub fn lr_at(t: f64, cfg: &TrainConfig) -> f64 {
    let t = t.max(0.0);
    if t < cfg.warmup_epochs {
        return cfg.base_lr * t / cfg.warmup_epochs;
    }
    let span = cfg.epochs as f64 - cfg.warmup_epochs;
    let frac = if span > 0.0 { ((t - cfg.warmup_epochs) / span).min(1.0) } else { 1.0 };
    cfg.base_lr * (1.0 - (1.0 - cfg.decay_factor) * frac)
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Decoupled weight decay Adam; state is keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    steps: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies `grads` (by parameter name) to the trainable buffers only.
    pub fn step<M: Parameterized>(&mut self, module: &mut M, grads: &BTreeMap<String, Vec<f64>>, lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps as i32);
        let c2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let state = &mut self.state;
        module.visit_mut("", &mut |name, t| {
            if !t.requires_grad() {
                return;
            }
            let Some(g) = grads.get(name) else { return };
            let s = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            for (i, p) in t.data_mut().iter_mut().enumerate() {
                s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
                s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (s.m[i] / c1) / ((s.v[i] / c2).sqrt() + eps) + wd * *p;
                *p -= lr * update;
            }
        });
    }
}

/// Maps each model modality to its index in the dataset, by name.
pub fn modality_indices(model: &StitchModel, dataset: &Dataset) -> Result<Vec<usize>> {
    model
        .config()
        .modalities
        .iter()
        .map(|spec| {
            let idx = dataset
                .modality_index(&spec.name)
                .ok_or_else(|| Error::Config(format!("dataset has no modality named {:?}", spec.name)))?;
            let have = dataset.modalities[idx].channels;
            if have != spec.channels {
                return Err(Error::Config(format!(
                    "modality {:?} has {have} channels in the dataset, model expects {}",
                    spec.name, spec.channels
                )));
            }
            Ok(idx)
        })
        .collect()
}

fn sample_images<'s>(sample: &'s Sample, indices: &[usize]) -> Vec<&'s Tensor> {
    indices.iter().map(|&i| &sample.images[i]).collect()
}

/// One optimizer step on the mean per-sample loss of `batch`.
pub fn train_step(
    model: &mut StitchModel,
    opt: &mut AdamW,
    batch: &[&Sample],
    indices: &[usize],
    lr: f64,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (loss, grads) = {
        let mut ctx = Ctx::new(Mode::Train, derive_seed(seed, opt.steps()));
        let mut terms = Vec::with_capacity(batch.len());
        for sample in batch {
            terms.push(model.loss(&mut ctx, &sample_images(sample, indices), &sample.labels, IGNORE_INDEX)?);
        }
        let total = ctx.tape.sum_all(&terms)?;
        let mean = ctx.tape.scale(total, 1.0 / batch.len() as f64);
        let loss = ctx.tape.scalar(mean);
        if !loss.is_finite() {
            return Err(Error::NonFinite { step: opt.steps() as usize, loss });
        }
        ctx.tape.backward(mean)?;
        let mut grads = BTreeMap::new();
        model.visit("", &mut |name, t| {
            if t.requires_grad() {
                if let Some(g) = ctx.grad_of(t) {
                    grads.insert(name.to_string(), g.to_vec());
                }
            }
        });
        (loss, grads)
    };
    opt.step(model, &grads, lr);
    Ok(loss)
}

pub fn evaluate(model: &StitchModel, dataset: &Dataset) -> Result<Metrics> {
    let indices = modality_indices(model, dataset)?;
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for sample in &dataset.samples {
        let pred = model.predict(&sample_images(sample, &indices))?;
        cm.update(&sample.labels, &pred, IGNORE_INDEX)?;
    }
    Ok(cm.metrics())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub eval_miou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub final_metrics: Option<Metrics>,
}

pub fn fit(
    model: &mut StitchModel,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set has no samples".into()));
    }
    if train.num_classes != model.num_classes() {
        return Err(Error::Config(format!(
            "dataset has {} classes, model expects {}",
            train.num_classes,
            model.num_classes()
        )));
    }
    let indices = modality_indices(model, train)?;
    let mut opt = AdamW::new(cfg);
    let mut report = TrainReport { epochs: Vec::new(), final_metrics: None };
    for epoch in 0..cfg.epochs {
        let batches = batch_iter(train.len(), cfg.batch_size, cfg.seed, epoch as u64);
        let mut total = 0.0;
        let mut lr = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            lr = lr_at(epoch as f64 + b as f64 / batches.len() as f64, cfg);
            let samples: Vec<&Sample> = batch.iter().map(|&i| &train.samples[i]).collect();
            total += train_step(model, &mut opt, &samples, &indices, lr, cfg.seed)?;
        }
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        let eval_miou = match eval {
            Some(ds) if due || last => {
                let metrics = evaluate(model, ds)?;
                let miou = metrics.miou;
                if last {
                    report.final_metrics = Some(metrics);
                }
                Some(miou)
            }
            _ => None,
        };
        let log = EpochLog { epoch, mean_loss: total / batches.len() as f64, lr, eval_miou };
        on_epoch(&log);
        report.epochs.push(log);
    }
    Ok(report)
}
