//! Membership inference: a shadow model's soft labels on its own training data
//! (members) and on unseen data (non-members) train a binary attack model,
//! which then judges a victim's soft labels.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, LabeledDataset, Seed};
use crate::error::{Error, Result};
use crate::nn::{
    build_small_cnn, cross_entropy_mean, evaluate_accuracy, softmax_rows, train_supervised, Dense, Model, TrainConfig,
    TrainStats, PROB_FLOOR,
};
use crate::oracle::{OracleService, SourceEnsemble};
use crate::pipeline::stage_init_another;

/// Soft-label rows with membership bits: 1 for members, 0 for non-members.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackDataset {
    pub x: Array2<f64>,
    pub y: Vec<u32>,
    pub members: usize,
    pub nonmembers: usize,
}

impl AttackDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn select(&self, idx: &[usize]) -> Self {
        let y: Vec<u32> = idx.iter().map(|&i| self.y[i]).collect();
        let members = y.iter().filter(|&&v| v == 1).count();
        Self { x: self.x.select(Axis(0), idx), nonmembers: y.len() - members, members, y }
    }
}

/// Soft labels of `model` for both pools, truncated to the smaller pool size.
pub fn soft_label_pairs(
    model: &Model,
    member_pool: &LabeledDataset,
    nonmember_pool: &LabeledDataset,
) -> Result<AttackDataset> {
    if member_pool.is_empty() || nonmember_pool.is_empty() {
        return Err(Error::InvalidInput("membership pools must be non-empty".into()));
    }
    let n = member_pool.len().min(nonmember_pool.len());
    let members = model.confidences(&member_pool.images.slice(0, n))?.into_inner();
    let nonmembers = model.confidences(&nonmember_pool.images.slice(0, n))?.into_inner();
    let x = ndarray::concatenate(Axis(0), &[members.view(), nonmembers.view()]).expect("same width");
    let y = std::iter::repeat_n(1, n).chain(std::iter::repeat_n(0, n)).collect();
    Ok(AttackDataset { x, y, members: n, nonmembers: n })
}

/// Attack training data from a shadow model trained on `member_pool`.
pub fn build_attack_dataset(
    shadow: &Model,
    member_pool: &LabeledDataset,
    nonmember_pool: &LabeledDataset,
) -> Result<AttackDataset> {
    soft_label_pairs(shadow, member_pool, nonmember_pool)
}

/// Input encoding of a soft-label row: probabilities sorted in descending
/// order, then `-ln(max(p, floor)) / -ln(floor)`, which maps into `[0, 1]`.
/// Near-one confidences that differ only in the fourth decimal become
/// distinguishable, and the encoding ignores which class was predicted.
pub fn encode_soft_labels(x: ArrayView2<f64>) -> Array2<f64> {
    let scale = -PROB_FLOOR.ln();
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let mut v = row.to_vec();
        v.sort_by(|a, b| b.total_cmp(a));
        for (dst, p) in row.iter_mut().zip(v) {
            *dst = -p.max(PROB_FLOOR).ln() / scale;
        }
    }
    out
}

/// Hidden widths of the attack network.
pub const ATTACK_HIDDEN: [usize; 4] = [128, 64, 32, 16];

/// Fully connected binary classifier with ReLU between its affine layers,
/// applied to [`encode_soft_labels`] of its input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackModel {
    layers: Vec<Dense<f64>>,
}

impl AttackModel {
    pub fn new(inputs: usize, cfg: &TrainConfig) -> Self {
        let mut rng = cfg.seed.rng();
        let mut widths = vec![inputs];
        widths.extend(ATTACK_HIDDEN);
        widths.push(2);
        let layers = widths.windows(2).map(|w| Dense::init(w[0], w[1], (6.0 / w[0] as f64).sqrt(), &mut rng)).collect();
        Self { layers }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Logits and the post-activation input of every layer.
    fn forward_cached(&self, x: ArrayView2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = encode_soft_labels(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(h.view());
            inputs.push(h);
            h = if i + 1 < self.layers.len() { out.mapv(|v| v.max(0.0)) } else { out };
        }
        (h, inputs)
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    /// Probability of membership for each row.
    pub fn membership_probability(&self, x: ArrayView2<f64>) -> Array1<f64> {
        softmax_rows(self.logits(x).view()).column(1).to_owned()
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<u32> {
        self.logits(x).rows().into_iter().map(|r| u32::from(r[1] > r[0])).collect()
    }

    /// Percentage of correct membership decisions.
    pub fn accuracy(&self, data: &AttackDataset) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let hits = self.predict(data.x.view()).iter().zip(&data.y).filter(|(p, y)| p == y).count();
        100.0 * hits as f64 / data.len() as f64
    }

    fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(Dense::zeros_like).collect() }
    }

    /// One SGD step with optional heavy-ball momentum held in `velocity`.
    fn step(&mut self, x: ArrayView2<f64>, y: &[u32], lr: f64, momentum: f64, velocity: &mut AttackModel) -> f64 {
        let (logits, inputs) = self.forward_cached(x);
        let (loss, mut grad) = cross_entropy_mean(logits.view(), y);
        for i in (0..self.layers.len()).rev() {
            let (gw, gb) = self.layers[i].backward_params(inputs[i].view(), &grad);
            if i > 0 {
                grad = self.layers[i].backward_input(&grad);
                grad.zip_mut_with(&inputs[i], |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            let v = &mut velocity.layers[i];
            v.weight.zip_mut_with(&gw, |v, &g| *v = momentum * *v + g);
            v.bias.zip_mut_with(&gb, |v, &g| *v = momentum * *v + g);
            self.layers[i].weight.scaled_add(-lr, &v.weight);
            self.layers[i].bias.scaled_add(-lr, &v.bias);
        }
        loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackTraining {
    pub stats: TrainStats,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub train_size: usize,
    pub holdout_size: usize,
}

/// Fraction of the attack data held out for reporting.
const HOLDOUT_FRACTION: f64 = 0.2;

/// Trains the attack network with minibatch SGD on cross-entropy. A seeded
/// fifth of the data is held out and its accuracy reported.
pub fn train_attack_model(data: &AttackDataset, cfg: &TrainConfig) -> Result<(AttackModel, AttackTraining)> {
    cfg.validate()?;
    if data.members == 0 || data.nonmembers == 0 {
        return Err(Error::InvalidInput("attack data needs both members and non-members".into()));
    }
    let mut rng = cfg.seed.derive(1).rng();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let holdout_n = ((data.len() as f64 * HOLDOUT_FRACTION).round() as usize).min(data.len() - 1);
    let holdout = data.select(&order[..holdout_n]);
    let train = data.select(&order[holdout_n..]);

    let mut model = AttackModel::new(data.x.ncols(), cfg);
    let mut velocity = model.zeros_like();
    let mut stats = TrainStats::default();
    let full_loss = |m: &AttackModel| cross_entropy_mean(m.logits(train.x.view()).view(), &train.y).0;
    stats.initial_loss = full_loss(&model);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in idx.chunks(cfg.batch_size) {
            let x = train.x.select(Axis(0), chunk);
            let y: Vec<u32> = chunk.iter().map(|&i| train.y[i]).collect();
            let loss = model.step(x.view(), &y, cfg.learning_rate, cfg.momentum, &mut velocity);
            if !loss.is_finite() {
                return Err(Error::Diverged { step: stats.steps, loss });
            }
            total += loss;
            batches += 1;
            stats.steps += 1;
        }
        stats.epoch_losses.push(total / batches.max(1) as f64);
    }
    stats.final_loss = full_loss(&model);
    if !stats.final_loss.is_finite() {
        return Err(Error::Diverged { step: stats.steps, loss: stats.final_loss });
    }
    let report = AttackTraining {
        train_accuracy: model.accuracy(&train),
        holdout_accuracy: model.accuracy(&holdout),
        train_size: train.len(),
        holdout_size: holdout.len(),
        stats,
    };
    Ok((model, report))
}

/// Attack accuracy on a victim whose true member and non-member pools are known.
pub fn judge(
    atk: &AttackModel,
    victim: &Model,
    member_pool: &LabeledDataset,
    nonmember_pool: &LabeledDataset,
) -> Result<f64> {
    Ok(atk.accuracy(&soft_label_pairs(victim, member_pool, nonmember_pool)?))
}

/// Mean of the largest confidence per row, separately for members and non-members.
pub fn mean_max_confidence(data: &AttackDataset) -> (f64, f64) {
    let mut sums = [0.0, 0.0];
    let mut counts = [0usize, 0];
    for (row, &y) in data.x.rows().into_iter().zip(&data.y) {
        sums[y as usize] += row.fold(0.0f64, |m, &v| m.max(v));
        counts[y as usize] += 1;
    }
    (sums[1] / counts[1].max(1) as f64, sums[0] / counts[0].max(1) as f64)
}

/// Settings of the end-to-end membership experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiaConfig {
    /// Samples per pool: victim members, victim non-members, shadow members, shadow non-members.
    pub pool_size: usize,
    /// Training of the source victims and of the shadow model.
    pub victim: TrainConfig,
    pub attack: TrainConfig,
    /// Training of the query-initialized target model.
    pub init: TrainConfig,
    /// Source domain whose spare pools train the shadow model.
    pub shadow_domain: usize,
    pub query_batch_size: usize,
}

impl Default for MiaConfig {
    fn default() -> Self {
        let victim =
            TrainConfig { learning_rate: 0.05, momentum: 0.9, epochs: 100, batch_size: 32, ..Default::default() };
        let attack =
            TrainConfig { learning_rate: 0.01, momentum: 0.9, epochs: 100, batch_size: 32, ..Default::default() };
        let init = TrainConfig { learning_rate: 0.02, momentum: 0.9, epochs: 10, batch_size: 64, ..Default::default() };
        Self { pool_size: 150, victim, attack, init, shadow_domain: 0, query_batch_size: 256 }
    }
}

impl MiaConfig {
    /// Same settings with every seed derived from `seed`.
    pub fn reseeded(&self, seed: Seed) -> Self {
        let mut cfg = self.clone();
        cfg.victim.seed = seed.derive(200);
        cfg.attack.seed = seed.derive(201);
        cfg.init.seed = seed.derive(202);
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaReport {
    pub shadow_train_accuracy: f64,
    pub shadow_test_accuracy: f64,
    /// Mean top confidence of the shadow on its members and non-members.
    pub shadow_max_confidence: (f64, f64),
    pub attack: AttackTraining,
    /// Acc_judge of each source model on its own members and non-members.
    pub source_judge: Vec<f64>,
    /// Acc_judge of the query-initialized target model on the same pools.
    pub init_judge: Vec<f64>,
    pub source_mean: f64,
    pub init_mean: f64,
    /// `source_mean - init_mean`.
    pub gap: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Trains small source victims, a shadow model and the attack, then judges the
/// source models and a target model initialized only from oracle labels on
/// `third_party`. Members are always the victims' source training pools.
pub fn run_membership_experiment(
    sources: &[LabeledDataset],
    third_party: &ImageTensor,
    seed: Seed,
    cfg: &MiaConfig,
) -> Result<MiaReport> {
    let n = cfg.pool_size;
    if n == 0 {
        return Err(Error::Config("pool_size must be at least 1".into()));
    }
    let shadow_src = sources
        .get(cfg.shadow_domain)
        .ok_or_else(|| Error::Config(format!("shadow domain {} out of range", cfg.shadow_domain)))?;
    let mut pools = Vec::with_capacity(sources.len());
    for (d, domain) in sources.iter().enumerate() {
        if domain.len() < 4 * n {
            return Err(Error::InvalidInput(format!("source {d} has {} samples, need {}", domain.len(), 4 * n)));
        }
        let part = |q: usize| domain.select(&(q * n..(q + 1) * n).collect::<Vec<_>>());
        pools.push([part(0), part(1), part(2), part(3)]);
    }
    let victims: Vec<LabeledDataset> = pools.iter().map(|p| p[0].clone()).collect();
    let (ensemble, _) = SourceEnsemble::train(&victims, &cfg.victim, seed.derive(210))?;

    let shadow_pools = &pools[cfg.shadow_domain];
    let shadow_init = build_small_cnn(shadow_src.images.image_shape(), shadow_src.num_classes, seed.derive(211))?;
    let (shadow, _) = train_supervised(&shadow_init, &shadow_pools[2], &cfg.victim)?;
    let atk_data = build_attack_dataset(&shadow, &shadow_pools[2], &shadow_pools[3])?;
    let (atk, attack) = train_attack_model(&atk_data, &cfg.attack)?;

    let mut source_judge = Vec::with_capacity(pools.len());
    for (model, p) in ensemble.models().iter().zip(&pools) {
        source_judge.push(judge(&atk, model, &p[0], &p[1])?);
    }
    let service = OracleService::new(ensemble);
    let (init, _, _) = stage_init_another(
        &service,
        third_party,
        shadow_src.num_classes,
        &cfg.init,
        seed.derive(212),
        cfg.query_batch_size,
    )?;
    let init_judge = pools.iter().map(|p| judge(&atk, &init, &p[0], &p[1])).collect::<Result<Vec<_>>>()?;

    let (source_mean, init_mean) = (mean(&source_judge), mean(&init_judge));
    Ok(MiaReport {
        shadow_train_accuracy: evaluate_accuracy(&shadow, &shadow_pools[2])?,
        shadow_test_accuracy: evaluate_accuracy(&shadow, &shadow_pools[3])?,
        shadow_max_confidence: mean_max_confidence(&atk_data),
        attack,
        source_judge,
        init_judge,
        source_mean,
        init_mean,
        gap: source_mean - init_mean,
    })
}
