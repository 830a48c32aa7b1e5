use ndarray::{Axis, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{cast, cross_entropy_mean, Model};
use crate::data::{ImageTensor, LabeledDataset, Seed};
use crate::error::{Error, Result};

/// Plain minibatch SGD; momentum and weight decay default to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: Seed,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, batch_size: 64, epochs: 10, seed: Seed(0), momentum: 0.0, weight_decay: 0.0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Mean cross-entropy over the whole training set before the first step.
    pub initial_loss: f64,
    /// Same quantity after the last step.
    pub final_loss: f64,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Trains on `data` with mean cross-entropy.
pub fn train_supervised(model: &Model, data: &LabeledDataset, cfg: &TrainConfig) -> Result<(Model, TrainStats)> {
    if data.num_classes != model.num_classes() {
        return Err(Error::Shape(format!(
            "dataset has {} classes, model has {}",
            data.num_classes,
            model.num_classes()
        )));
    }
    fit(model, &data.images, &data.labels, cfg)
}

/// Full-dataset mean cross-entropy.
pub fn dataset_loss(model: &Model, images: &ImageTensor, labels: &[u32]) -> Result<f64> {
    let logits = model.logits(images)?.mapv(f64::from);
    Ok(cross_entropy_mean(logits.view(), labels).0)
}

/// Minibatch SGD on `(images, labels)` pairs. The input model is not modified.
pub fn fit(model: &Model, images: &ImageTensor, labels: &[u32], cfg: &TrainConfig) -> Result<(Model, TrainStats)> {
    cfg.validate()?;
    if images.len() != labels.len() {
        return Err(Error::Shape(format!("{} labels for {} images", labels.len(), images.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= model.num_classes()) {
        return Err(Error::InvalidInput(format!("label {bad} out of range")));
    }
    let mut model = model.clone();
    let mut stats = TrainStats::default();
    if images.is_empty() {
        return Ok((model, stats));
    }
    stats.initial_loss = dataset_loss(&model, images, labels)?;
    if !stats.initial_loss.is_finite() {
        return Err(Error::Diverged { step: 0, loss: stats.initial_loss });
    }
    let lr: f32 = cast(cfg.learning_rate);
    let momentum: f32 = cast(cfg.momentum);
    let decay: f32 = cast(cfg.weight_decay);
    let mut velocity = (cfg.momentum > 0.0).then(|| model.zeros_like());
    let mut rng = cfg.seed.rng();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let view = images.view();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let x = view.select(Axis(0), chunk);
            let y: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let (out, cache) = model.forward(x.view())?;
            let (loss, d_logits) = cross_entropy_mean(out.logits.view(), &y);
            let loss = loss as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged { step: stats.steps, loss });
            }
            let grads = model.backward(&out, &cache, None, Some(&d_logits), true, false).0.expect("params");
            apply_sgd(&mut model, &grads, velocity.as_mut(), lr, momentum, decay);
            total += loss;
            batches += 1;
            stats.steps += 1;
        }
        stats.epoch_losses.push(total / batches.max(1) as f64);
    }
    stats.final_loss = dataset_loss(&model, images, labels)?;
    if !stats.final_loss.is_finite() {
        return Err(Error::Diverged { step: stats.steps, loss: stats.final_loss });
    }
    Ok((model, stats))
}

fn apply_sgd(model: &mut Model, grads: &Model, velocity: Option<&mut Model>, lr: f32, momentum: f32, decay: f32) {
    let grads = grads.tensors();
    match velocity {
        Some(vel) => {
            for ((mut p, mut v), (_, g)) in model.tensors_mut().into_iter().zip(vel.tensors_mut()).zip(grads) {
                Zip::from(&mut p).and(&mut v).and(&g).for_each(|p, v, &g| {
                    *v = momentum * *v + g + decay * *p;
                    *p -= lr * *v;
                });
            }
        }
        None => {
            for (mut p, (_, g)) in model.tensors_mut().into_iter().zip(grads) {
                Zip::from(&mut p).and(&g).for_each(|p, &g| *p -= lr * (g + decay * *p));
            }
        }
    }
}

/// Percentage of argmax-correct predictions.
pub fn evaluate_accuracy(model: &Model, data: &LabeledDataset) -> Result<f64> {
    let pred = model.predict(&data.images)?;
    Ok(accuracy(&pred, &data.labels))
}

pub(crate) fn accuracy(pred: &[u32], labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    100.0 * hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_small_cnn, Architecture};
    use ndarray::Array4;

    /// Class 0: bright left half, class 1: bright right half.
    fn halves(n: usize) -> LabeledDataset {
        let mut rng = Seed(4).rng();
        let labels: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        let data = Array4::from_shape_fn((n, 8, 8, 1), |(i, x, _, _)| {
            let on = (x < 4) == (labels[i] == 0);
            let base = if on { 0.7 } else { 0.2 };
            base + 0.1 * rand::Rng::random::<f32>(&mut rng)
        });
        LabeledDataset::new(ImageTensor::new(data).unwrap(), labels, 2).unwrap()
    }

    fn toy_model() -> Model {
        let arch = Architecture { input_shape: [8, 8, 1], conv_channels: vec![4, 8], feature_dim: 16, num_classes: 2 };
        Model::new(arch, Seed(9)).unwrap()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let model = toy_model();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 2, ..Default::default() };
        let (trained, stats) = train_supervised(&model, &halves(32), &cfg).unwrap();
        assert_eq!(trained, model);
        assert_eq!(stats.initial_loss, stats.final_loss);
    }

    #[test]
    fn separable_toy_reaches_high_accuracy() {
        let data = halves(128);
        let cfg = TrainConfig { learning_rate: 0.05, batch_size: 16, epochs: 20, ..Default::default() };
        let (trained, stats) = train_supervised(&toy_model(), &data, &cfg).unwrap();
        assert!(stats.final_loss <= stats.initial_loss);
        assert!(evaluate_accuracy(&trained, &data).unwrap() >= 95.0);
    }

    #[test]
    fn diverging_run_reports_step() {
        let cfg = TrainConfig { learning_rate: 1e30, batch_size: 8, epochs: 3, ..Default::default() };
        match train_supervised(&toy_model(), &halves(32), &cfg) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|(_, s)| s)),
        }
    }

    #[test]
    fn class_count_mismatch_is_rejected() {
        let model = build_small_cnn([8, 8, 1], 3, Seed(0)).unwrap();
        assert!(train_supervised(&model, &halves(4), &TrainConfig::default()).is_err());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(matches!(train_supervised(&toy_model(), &halves(4), &cfg), Err(Error::Config(_))));
    }
}
