//! Plain SGD on cross-entropy, and held-out evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self as ad, Tape};
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::harness::metrics::MetricRecord;
use crate::model::Model;
use crate::params::stream_rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds the batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub samples: usize,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `logits[n,K]` whose argmax equals the label.
pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = logits.dims2()?;
    if n != labels.len() || n == 0 {
        return Err(Error::Config(format!("{n} logit rows for {} labels", labels.len())));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(&logits.data()[i * k..(i + 1) * k]) == l)
        .count();
    Ok(hits as f64 / n as f64)
}

/// Numerically stable `−log softmax(logits)[label]`.
pub fn cross_entropy_value(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Epoch-shuffled batch indices, a pure function of `(seed, n, batch, steps)`.
pub fn batch_schedule(seed: u64, n: usize, batch: usize, steps: usize) -> Vec<Vec<usize>> {
    let mut rng = stream_rng(seed, "batches");
    let mut order: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut b = Vec::with_capacity(batch);
        while b.len() < batch {
            if order.is_empty() {
                order = (0..n).collect();
                order.shuffle(&mut rng);
                order.reverse();
            }
            b.push(order.pop().expect("non-empty"));
        }
        out.push(b);
    }
    out
}

/// One SGD step on the mean loss over `batch`. Returns the batch metrics.
pub fn train_step(model: &mut Model, data: &Dataset, batch: &[usize], lr: f64, step: usize) -> Result<MetricRecord> {
    let tape = Tape::new();
    let p = model.store.bind(&tape);
    let mut total: Option<ad::Var> = None;
    let mut correct = 0usize;
    for &i in batch {
        let img = tape.constant(data.images[i].clone());
        let logits = model.forward_sample(&img, &p)?;
        if argmax(logits.value().data()) == data.labels[i] {
            correct += 1;
        }
        let l = ad::cross_entropy(&logits, data.labels[i])?;
        total = Some(match total {
            None => l,
            Some(t) => ad::add(&t, &l)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
    let loss = ad::scale(&total, 1.0 / batch.len() as f64);
    let loss_value = loss.value().data()[0];
    if !loss_value.is_finite() {
        let culprit = model.store.first_non_finite().map(str::to_string).unwrap_or_else(|| largest_param(model));
        return Err(Error::NonFinite(format!("loss {loss_value} at step {step}; parameter `{culprit}`")));
    }
    let grads = tape.backward(&loss)?;
    model.store.zero_grads();
    model.store.accumulate_grads(&grads, &p);
    model.store.sgd_step(lr)?;
    model.store.zero_grads();
    if let Some(name) = model.store.first_non_finite() {
        return Err(Error::NonFinite(format!("parameter `{name}` after step {step}")));
    }
    Ok(MetricRecord {
        step,
        loss: loss_value,
        accuracy: correct as f64 / batch.len() as f64,
    })
}

fn largest_param(model: &Model) -> String {
    model
        .store
        .iter()
        .max_by(|a, b| {
            let ma = a.tensor.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let mb = b.tensor.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            ma.total_cmp(&mb)
        })
        .map(|p| p.name.clone())
        .unwrap_or_default()
}

/// Runs `cfg.steps` SGD steps and returns one record per step.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<MetricRecord>> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("training needs data and a positive batch size".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::Config(format!("learning rate must be finite and ≥ 0, got {}", cfg.lr)));
    }
    batch_schedule(cfg.seed, data.len(), cfg.batch_size, cfg.steps)
        .iter()
        .enumerate()
        .map(|(step, b)| train_step(model, data, b, cfg.lr, step))
        .collect()
}

/// Accuracy and mean cross-entropy over `data`. Does not touch the model.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty set".into()));
    }
    let k = model.cfg.num_classes;
    let mut all = Vec::with_capacity(data.len() * k);
    let mut loss = 0.0;
    for (img, &label) in data.images.iter().zip(&data.labels) {
        let logits: Tensor = model.logits(img)?;
        loss += cross_entropy_value(logits.data(), label);
        all.extend_from_slice(logits.data());
    }
    let n = data.len();
    Ok(EvalReport {
        accuracy: accuracy_from_logits(&Tensor::new(vec![n, k], all)?, &data.labels)?,
        mean_loss: loss / n as f64,
        samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_take_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn schedule_covers_each_epoch() {
        let s = batch_schedule(1, 10, 5, 2);
        let mut all: Vec<usize> = s.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(s, batch_schedule(1, 10, 5, 2));
    }

    #[test]
    fn stable_cross_entropy() {
        let l = cross_entropy_value(&[1000.0, 0.0], 0);
        assert!(l.abs() < 1e-12);
        assert!((cross_entropy_value(&[0.0, 0.0], 1) - 2f64.ln()).abs() < 1e-12);
    }
}
