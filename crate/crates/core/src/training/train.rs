//! The epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::noise::NoiseRng;
use crate::tensor::Tensor;

use super::model::Model;
use super::optim::{cosine_lr, sgd_step, OptimizerConfig, OptimizerState, ScheduleConfig};

/// RNG stream for minibatch order.
pub const SHUFFLE_STREAM: u64 = 1;
/// RNG stream for noise masks.
pub const NOISE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            eval_batch_size: 256,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Absent for epoch 0, which only evaluates the initial model.
    pub train_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub epoch: usize,
    pub step: usize,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub divergence: Option<DivergenceInfo>,
}

impl TrainReport {
    pub fn final_eval_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.eval_accuracy)
    }

    /// `Err(Error::Divergence)` if the run was aborted.
    pub fn check(&self) -> Result<()> {
        match &self.divergence {
            None => Ok(()),
            Some(d) => Err(Error::Divergence {
                epoch: d.epoch,
                step: d.step,
                detail: d.detail.clone(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == l
        })
        .count()
}

/// Eval-mode loss and accuracy over the whole dataset.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let batch_size = batch_size.max(1);
    let mut loss = 0.0;
    let mut hits = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, y) = data.batch(chunk);
        let logits = model.predict(&x)?;
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let ce = g.softmax_cross_entropy(l, &y)?;
        loss += g.value(ce).item()? * chunk.len() as f64;
        hits += correct(&logits, &y);
    }
    Ok(Evaluation {
        loss: loss / data.len() as f64,
        accuracy: hits as f64 / data.len() as f64,
    })
}

/// Trains `model` in place. Minibatch order and noise masks come from
/// `seed`; a non-finite loss or gradient stops the run and is recorded in
/// [`TrainReport::divergence`] together with the epochs completed so far.
pub fn train(model: &mut Model, train_set: &Dataset, eval_set: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if train_set.classes != model.config().class_count {
        return Err(Error::config(format!(
            "model has {} classes, dataset {}",
            model.config().class_count,
            train_set.classes
        )));
    }
    let batch = cfg.batch_size.min(train_set.len());
    if batch < 2 {
        return Err(Error::contract("training batches need at least 2 samples for batch norm"));
    }
    let steps_per_epoch = train_set.len() / batch;
    let sched = ScheduleConfig {
        total_steps: (cfg.epochs * steps_per_epoch).max(1),
        base_lr: cfg.optimizer.base_lr,
    };
    let mut opt = OptimizerState::new(model.params(), &cfg.optimizer)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(SHUFFLE_STREAM);
    let mut noise = NoiseRng::with_stream(seed, NOISE_STREAM);

    let initial = evaluate(model, eval_set, cfg.eval_batch_size)?;
    let mut report = TrainReport {
        seed,
        epochs: vec![EpochRecord {
            epoch: 0,
            lr: cosine_lr(0, &sched)?,
            train_loss: None,
            train_accuracy: None,
            eval_loss: initial.loss,
            eval_accuracy: initial.accuracy,
        }],
        divergence: None,
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut hits = 0;
        let mut lr = 0.0;
        for idx in order.chunks_exact(batch) {
            lr = cosine_lr(step, &sched)?;
            let (x, y) = train_set.batch(idx);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let f = model.forward(&mut g, xv, Mode::Train, &mut noise)?;
            let loss = g.softmax_cross_entropy(f.logits, &y)?;
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                report.divergence = Some(DivergenceInfo {
                    epoch,
                    step,
                    detail: format!("loss {lv}"),
                });
                return Ok(report);
            }
            loss_sum += lv * idx.len() as f64;
            hits += correct(g.value(f.logits), &y);
            let grads = g.backward(loss)?;
            let grads: Vec<Tensor> = f
                .params
                .iter()
                .zip(model.params())
                .map(|(v, p)| grads.wrt(*v, &p.value))
                .collect();
            match sgd_step(model.params_mut(), &grads, &mut opt, lr) {
                Ok(()) => {}
                Err(Error::Numeric(detail)) => {
                    report.divergence = Some(DivergenceInfo { epoch, step, detail });
                    return Ok(report);
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
        let seen = steps_per_epoch * batch;
        let ev = evaluate(model, eval_set, cfg.eval_batch_size)?;
        report.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: Some(loss_sum / seen as f64),
            train_accuracy: Some(hits as f64 / seen as f64),
            eval_loss: ev.loss,
            eval_accuracy: ev.accuracy,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_blobs;
    use crate::training::{build_model, Architecture, ModelConfig, NoiseType};

    fn blob_model(noise: NoiseType) -> ModelConfig {
        ModelConfig {
            architecture: Architecture::PlainCnn,
            depth: 2,
            width: 1,
            base_width: 8,
            input_channels: 4,
            class_count: 2,
            noise_type: noise,
            ..ModelConfig::default()
        }
    }

    fn cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 32,
            eval_batch_size: 128,
            optimizer: OptimizerConfig { base_lr: 0.05, momentum: 0.9, weight_decay: 5e-4 },
        }
    }

    #[test]
    fn zero_epochs_only_evaluates() {
        let data = synthetic_blobs(2, 4, 64, 1).unwrap();
        let mut m = build_model(&blob_model(NoiseType::None), 1).unwrap();
        let before = m.clone();
        let r = train(&mut m, &data, &data, &cfg(0), 1).unwrap();
        assert_eq!(r.epochs.len(), 1);
        assert_eq!(r.epochs[0].train_loss, None);
        assert_eq!(m, before);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let all = synthetic_blobs(2, 4, 512, 7).unwrap();
        let (tr, te) = all.split_at(384).unwrap();
        let mut m = build_model(&blob_model(NoiseType::None), 3).unwrap();
        let r = train(&mut m, &tr, &te, &cfg(20), 3).unwrap();
        assert!(r.final_eval_accuracy().unwrap() > 0.99, "{:?}", r.epochs.last());
    }

    #[test]
    fn same_seed_same_report() {
        let data = synthetic_blobs(2, 4, 96, 2).unwrap();
        let run = || {
            let mut m = build_model(&blob_model(NoiseType::Ncmn1), 5).unwrap();
            let r = train(&mut m, &data, &data, &cfg(2), 5).unwrap();
            (r, m)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_keeps_partial_report() {
        let data = synthetic_blobs(2, 4, 64, 1).unwrap();
        let mut m = build_model(&blob_model(NoiseType::None), 1).unwrap();
        let mut c = cfg(3);
        c.optimizer.base_lr = 1e300;
        let r = train(&mut m, &data, &data, &c, 1).unwrap();
        assert!(r.divergence.is_some());
        assert!(matches!(r.check(), Err(Error::Divergence { .. })));
        assert!(!r.epochs.is_empty());
    }
}
