//! Distributionally adversarial training: gradient descent on third-party
//! inputs so their feature distribution moves toward the target's.
//!
//! Each sample's feature vector is turned into a distribution with a softmax
//! over the feature dimension. The objective for a batch is the mean of
//! `KL(softmax(g(x_t)) || softmax(g(x_e)))` over positionally paired samples.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{save_dataset, Dataset, ImageTensor, Seed, StorageDtype, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{
    cast, grad_wrt_input, log_softmax_rows, softmax_rows, Model, Objective, ObjectiveGrad, Outputs, Scalar, PROB_FLOOR,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatConfig {
    /// Descent steps per batch.
    pub iterations: usize,
    pub step_size: f64,
    pub batch_size: usize,
    /// Times a step is halved when it increases the batch objective.
    pub max_halvings: usize,
    /// Seed for drawing the target batch paired with each third-party batch.
    pub seed: Seed,
}

impl Default for DatConfig {
    fn default() -> Self {
        Self { iterations: 5, step_size: 5.0, batch_size: 64, max_halvings: 5, seed: Seed(0) }
    }
}

impl DatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("DAT needs at least one iteration".into()));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("DAT step size must be >= 0, got {}", self.step_size)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("DAT batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Softmax of each feature row: one distribution per sample over the feature dimension.
pub fn feature_distribution<T: Scalar>(features: ArrayView2<T>) -> Array2<T> {
    softmax_rows(features)
}

fn log_floor<T: Scalar>() -> T {
    cast::<T>(PROB_FLOOR.ln())
}

/// Mean per-row `KL(p || softmax(z))` for reference distributions `p`.
fn kl_against<T: Scalar>(reference: ArrayView2<T>, features: ArrayView2<T>) -> T {
    let floor = log_floor::<T>();
    let log_q = log_softmax_rows(features);
    let mut total = T::zero();
    Zip::from(&reference).and(&log_q).for_each(|&p, &lq| {
        if p > T::zero() {
            total += p * (p.ln().max(floor) - lq.max(floor));
        }
    });
    // Rounding can leave a tiny negative value where the true divergence is zero.
    (total / cast::<T>(reference.nrows().max(1) as f64)).max(T::zero())
}

/// Mean paired KL between feature matrices; `target` is the reference.
pub fn feature_kl_from_features<T: Scalar>(target: ArrayView2<T>, perturbed: ArrayView2<T>) -> Result<T> {
    if target.dim() != perturbed.dim() {
        return Err(Error::Shape(format!("paired batches differ: {:?} vs {:?}", target.dim(), perturbed.dim())));
    }
    Ok(kl_against(feature_distribution(target).view(), perturbed))
}

/// Mean paired feature KL of two equally sized batches under `model`.
pub fn feature_kl(model: &Model, x_t: &ImageTensor, x_e: &ImageTensor) -> Result<f64> {
    if x_t.len() != x_e.len() {
        return Err(Error::Shape(format!(
            "{} target samples paired with {} third-party samples",
            x_t.len(),
            x_e.len()
        )));
    }
    let ft = model.extract(x_t.view())?.mapv(f64::from);
    let fe = model.extract(x_e.view())?.mapv(f64::from);
    feature_kl_from_features(ft.view(), fe.view())
}

/// The DAT objective as a function of the perturbed batch, with the target
/// side's feature distributions held fixed.
#[derive(Debug, Clone)]
pub struct FeatureKl<T> {
    reference: Array2<T>,
}

impl<T: Scalar> FeatureKl<T> {
    pub fn new(model: &Model<T>, x_t: ArrayView4<T>) -> Result<Self> {
        Ok(Self { reference: feature_distribution(model.extract(x_t)?.view()) })
    }

    pub fn reference(&self) -> ArrayView2<'_, T> {
        self.reference.view()
    }

    fn check(&self, outputs: &Outputs<T>) -> Result<()> {
        if outputs.features.dim() != self.reference.dim() {
            return Err(Error::Shape(format!(
                "features {:?} do not match the paired target batch {:?}",
                outputs.features.dim(),
                self.reference.dim()
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Objective<T> for FeatureKl<T> {
    fn name(&self) -> &str {
        "feature_kl"
    }

    fn value(&self, _: ArrayView4<T>, outputs: &Outputs<T>) -> Result<T> {
        self.check(outputs)?;
        Ok(kl_against(self.reference.view(), outputs.features.view()))
    }

    fn gradient(&self, _: ArrayView4<T>, outputs: &Outputs<T>) -> Result<ObjectiveGrad<T>> {
        self.check(outputs)?;
        let scale = cast::<T>(1.0 / self.reference.nrows().max(1) as f64);
        let q = softmax_rows(outputs.features.view());
        let grad = (&q - &self.reference).mapv(|v| v * scale);
        Ok(ObjectiveGrad { features: Some(grad), ..Default::default() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatBatchStats {
    pub start: usize,
    pub len: usize,
    pub initial_kl: f64,
    pub final_kl: f64,
    /// Step-size halvings summed over all iterations.
    pub halvings: usize,
    /// Iterations where no halving produced a decrease and the batch was kept.
    pub rejected_steps: usize,
}

#[derive(Debug, Clone)]
pub struct DatOutput {
    pub perturbed: UnlabeledDataset,
    pub batches: Vec<DatBatchStats>,
}

impl DatOutput {
    pub fn mean_initial_kl(&self) -> f64 {
        mean(self.batches.iter().map(|b| b.initial_kl))
    }

    pub fn mean_final_kl(&self) -> f64 {
        mean(self.batches.iter().map(|b| b.final_kl))
    }
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    values.sum::<f64>() / n.max(1) as f64
}

/// Draws the positional target partner of every third-party batch. Target
/// samples are shuffled once; each batch takes a window starting at a
/// uniformly drawn offset, wrapping around.
fn pair_batches(n_target: usize, batches: &[(usize, usize)], seed: Seed) -> Vec<Vec<usize>> {
    let mut rng = seed.rng();
    let mut order: Vec<usize> = (0..n_target).collect();
    order.shuffle(&mut rng);
    batches
        .iter()
        .map(|&(s, e)| {
            let offset = rng.random_range(0..n_target);
            (0..e - s).map(|i| order[(offset + i) % n_target]).collect()
        })
        .collect()
}

fn clip_step(x: &Array4<f32>, grad: &Array4<f32>, step: f32) -> Array4<f32> {
    let mut out = x.clone();
    Zip::from(&mut out).and(grad).for_each(|v, &g| *v = (*v - step * g).clamp(0.0, 1.0));
    out
}

fn run_batch(
    model: &Model,
    x_t: Array4<f32>,
    x_e: Array4<f32>,
    start: usize,
    cfg: &DatConfig,
) -> Result<(Array4<f32>, DatBatchStats)> {
    let objective = FeatureKl::new(model, x_t.view())?;
    let value = |x: &Array4<f32>| -> Result<f32> {
        let (outputs, _) = model.forward(x.view())?;
        objective.value(x.view(), &outputs)
    };
    let mut x = x_e.mapv(|v| v.clamp(0.0, 1.0));
    let mut current = value(&x)?;
    let mut stats = DatBatchStats {
        start,
        len: x.dim().0,
        initial_kl: f64::from(current),
        final_kl: 0.0,
        halvings: 0,
        rejected_steps: 0,
    };
    for _ in 0..cfg.iterations {
        let grad = grad_wrt_input(model, &objective, x.view())?;
        let mut step = cfg.step_size as f32;
        let mut accepted = false;
        for attempt in 0..=cfg.max_halvings {
            let candidate = clip_step(&x, &grad, step);
            let v = value(&candidate)?;
            if v <= current {
                x = candidate;
                current = v;
                accepted = true;
                break;
            }
            if attempt < cfg.max_halvings {
                step *= 0.5;
                stats.halvings += 1;
            }
        }
        if !accepted {
            stats.rejected_steps += 1;
        }
    }
    stats.final_kl = f64::from(current);
    Ok((x, stats))
}

/// Perturbs the whole third-party set toward the target. Neither the model nor
/// the target images are modified. The returned dataset carries fresh sample ids.
pub fn dat_generate(
    model: &Model,
    target: &ImageTensor,
    third_party: &ImageTensor,
    cfg: &DatConfig,
) -> Result<DatOutput> {
    cfg.validate()?;
    if third_party.is_empty() {
        return Err(Error::InvalidInput("third-party set is empty".into()));
    }
    if target.is_empty() {
        return Err(Error::InvalidInput("target set is empty".into()));
    }
    if target.image_shape() != third_party.image_shape() {
        return Err(Error::Shape("target and third-party images differ in shape".into()));
    }
    let n = third_party.len();
    let ranges: Vec<(usize, usize)> =
        (0..n).step_by(cfg.batch_size).map(|s| (s, (s + cfg.batch_size).min(n))).collect();
    let partners = pair_batches(target.len(), &ranges, cfg.seed);
    let results = ranges
        .par_iter()
        .zip(partners.par_iter())
        .map(|(&(s, e), idx)| {
            let x_t = target.view().select(Axis(0), idx);
            let x_e = third_party.view().slice_axis(Axis(0), (s..e).into()).to_owned();
            run_batch(model, x_t, x_e, s, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut batches = Vec::with_capacity(results.len());
    let mut parts = Vec::with_capacity(results.len());
    for (x, stats) in results {
        log::debug!("DAT batch at {}: KL {:.6} -> {:.6}", stats.start, stats.initial_kl, stats.final_kl);
        parts.push(x);
        batches.push(stats);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    let images = ImageTensor::new(ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?)?;
    Ok(DatOutput { perturbed: UnlabeledDataset::new(images), batches })
}

/// SHA-256 over every image's bytes in order.
pub fn dataset_digest(images: &ImageTensor) -> String {
    let mut hasher = Sha256::new();
    for i in 0..images.len() {
        hasher.update(images.image_bytes(i));
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_digest: String,
    pub output_digest: String,
    pub config: DatConfig,
    pub seed: Seed,
    pub mean_initial_kl: f64,
    pub mean_final_kl: f64,
}

/// Writes the perturbed set as an f32 dataset plus `provenance.json`.
pub fn save_perturbed(dir: impl AsRef<Path>, source: &ImageTensor, output: &DatOutput, cfg: &DatConfig) -> Result<()> {
    let dir = dir.as_ref();
    save_dataset(dir, &Dataset::Unlabeled(output.perturbed.clone()), StorageDtype::F32)?;
    let provenance = Provenance {
        source_digest: dataset_digest(source),
        output_digest: dataset_digest(&output.perturbed.images),
        config: cfg.clone(),
        seed: cfg.seed,
        mean_initial_kl: output.mean_initial_kl(),
        mean_final_kl: output.mean_final_kl(),
    };
    fs::write(dir.join("provenance.json"), serde_json::to_vec_pretty(&provenance)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use ndarray::array;

    fn tiny() -> Model {
        let arch = Architecture { input_shape: [4, 4, 1], conv_channels: vec![3, 4], feature_dim: 6, num_classes: 3 };
        Model::new(arch, Seed(5)).unwrap()
    }

    fn images(n: usize, offset: f32) -> ImageTensor {
        ImageTensor::new(Array4::from_shape_fn((n, 4, 4, 1), |(i, p, q, _)| {
            ((i * 7 + p * 3 + q * 5) as f32 * 0.119 + offset).fract()
        }))
        .unwrap()
    }

    #[test]
    fn identical_batches_have_zero_divergence() {
        let x = images(4, 0.1);
        assert!(feature_kl(&tiny(), &x, &x).unwrap().abs() < 1e-6);
    }

    #[test]
    fn mismatched_batches_are_rejected() {
        assert!(matches!(feature_kl(&tiny(), &images(3, 0.0), &images(2, 0.0)), Err(Error::Shape(_))));
    }

    #[test]
    fn hand_set_features_match_scalar_sum() {
        let ft = array![[0.1, 0.5, -0.3, 2.0], [1.0, 1.0, 0.0, -1.0]];
        let fe = array![[0.0, 0.2, 0.4, -0.5], [0.3, -2.0, 1.5, 0.0]];
        let softmax = |row: &[f64]| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(|v| v.exp() / z).collect::<Vec<_>>()
        };
        let mut expected = 0.0;
        for j in 0..2 {
            let p = softmax(&ft.row(j).to_vec());
            let q = softmax(&fe.row(j).to_vec());
            expected += (0..4).map(|f| p[f] * (p[f] / q[f]).ln()).sum::<f64>();
        }
        expected /= 2.0;
        let got = feature_kl_from_features(ft.view(), fe.view()).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn zero_step_is_identity() {
        let cfg = DatConfig { step_size: 0.0, batch_size: 3, ..Default::default() };
        let e = images(7, 0.3);
        let out = dat_generate(&tiny(), &images(5, 0.0), &e, &cfg).unwrap();
        assert_eq!(out.perturbed.images, e);
        assert_eq!(out.batches.len(), 3);
    }

    #[test]
    fn batch_equal_to_its_partner_stays_put() {
        let x = images(1, 0.2);
        let out = dat_generate(&tiny(), &x, &x, &DatConfig { batch_size: 1, ..Default::default() }).unwrap();
        assert_eq!(out.perturbed.images, x);
        assert_eq!(out.batches[0].initial_kl, 0.0);
    }

    #[test]
    fn objective_never_increases_and_stays_in_range() {
        let model = tiny();
        let target = images(8, 0.0);
        let e = images(8, 0.55);
        let before = model.clone();
        let target_before = target.clone();
        let out = dat_generate(&model, &target, &e, &DatConfig { batch_size: 4, ..Default::default() }).unwrap();
        for b in &out.batches {
            assert!(b.final_kl <= b.initial_kl, "{b:?}");
        }
        assert!(out.perturbed.images.view().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(model, before);
        assert_eq!(target, target_before);
        assert_ne!(out.perturbed.sample_ids()[0].digest, UnlabeledDataset::new(e).sample_ids()[0].digest);
    }

    #[test]
    fn input_gradient_matches_f64_differences() {
        let model = tiny().cast::<f64>();
        let xt = images(3, 0.0).view().mapv(f64::from);
        let xe = images(3, 0.4).view().mapv(f64::from);
        let obj = FeatureKl::new(&model, xt.view()).unwrap();
        let g = grad_wrt_input(&model, &obj, xe.view()).unwrap();
        let f = |x: &Array4<f64>| obj.value(x.view(), &model.forward(x.view()).unwrap().0).unwrap();
        let h = 1e-5;
        for idx in [(0, 0, 0, 0), (1, 2, 3, 0), (2, 3, 1, 0)] {
            let mut xp = xe.clone();
            xp[idx] += h;
            let mut xm = xe.clone();
            xm[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[idx]);
        }
    }

    #[test]
    fn provenance_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let e = images(3, 0.3);
        let cfg = DatConfig { batch_size: 2, ..Default::default() };
        let out = dat_generate(&tiny(), &images(3, 0.0), &e, &cfg).unwrap();
        save_perturbed(dir.path(), &e, &out, &cfg).unwrap();
        let p: Provenance = serde_json::from_slice(&fs::read(dir.path().join("provenance.json")).unwrap()).unwrap();
        assert_eq!(p.source_digest, dataset_digest(&e));
        assert_eq!(p.config, cfg);
    }
}
