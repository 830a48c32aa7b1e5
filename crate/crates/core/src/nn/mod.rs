//! Small convolutional models split into a feature extractor and a linear
//! classifier, together with the losses, objectives and training loop built on
//! top of them.
//!
//! Models are generic over the float type. Training and inference run in
//! `f32`; the `f64` instantiation exists so gradient checks can difference a
//! double-precision copy of the same parameters.

mod checkpoint;
mod layers;
mod loss;
mod objective;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{Conv3x3, Dense};
pub use loss::{cross_entropy_mean, log_softmax_rows, softmax_rows, ConfidenceMatrix, PROB_FLOOR};
pub use objective::{
    grad_wrt_input, ArgmaxAccuracy, CrossEntropyObjective, HalfSquaredNorm, Objective, ObjectiveGrad, SumOfInputs,
};
pub use train::{dataset_loss, evaluate_accuracy, fit, train_supervised, TrainConfig, TrainStats};

use ndarray::{Array2, Array4, ArrayView4, ArrayViewD, ArrayViewMutD, Axis, NdFloat};
use num_traits::FromPrimitive;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ImageTensor, Seed};
use crate::error::{Error, Result};
use layers::{avg_pool2, avg_pool2_backward, elu_backward_inplace, elu_inplace};

pub trait Scalar: NdFloat + FromPrimitive + std::iter::Sum {}
impl<T: NdFloat + FromPrimitive + std::iter::Sum> Scalar for T {}

#[inline]
pub(crate) fn cast<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("float conversion")
}

/// Architecture description, serialised alongside checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// `(w, h, c)` of one input image.
    pub input_shape: [usize; 3],
    pub conv_channels: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub fn small_cnn(input_shape: [usize; 3], num_classes: usize) -> Self {
        Self { input_shape, conv_channels: vec![16, 32], feature_dim: 128, num_classes }
    }

    fn flat_dim(&self) -> usize {
        let (mut a, mut b) = (self.input_shape[0], self.input_shape[1]);
        for _ in &self.conv_channels {
            a /= 2;
            b /= 2;
        }
        a * b * self.conv_channels.last().copied().unwrap_or(self.input_shape[2])
    }

    pub fn validate(&self) -> Result<()> {
        let [w, h, c] = self.input_shape;
        if w == 0 || h == 0 || c == 0 || self.feature_dim == 0 {
            return Err(Error::Shape(format!("invalid architecture dims {:?}", self)));
        }
        if self.num_classes == 0 {
            return Err(Error::Shape("num_classes must be positive".into()));
        }
        if !(2..=3).contains(&self.conv_channels.len()) || self.conv_channels.contains(&0) {
            return Err(Error::Shape("expected 2 or 3 non-empty convolution blocks".into()));
        }
        if self.flat_dim() == 0 {
            return Err(Error::Shape(format!(
                "input {w}x{h} too small for {} pooling stages",
                self.conv_channels.len()
            )));
        }
        Ok(())
    }
}

/// Extractor `g` (conv blocks + projection) followed by classifier `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub arch: Architecture,
    pub blocks: Vec<Conv3x3<T>>,
    pub projection: Dense<T>,
    pub head: Dense<T>,
}

/// Extractor features and classifier logits for a batch.
#[derive(Debug, Clone)]
pub struct Outputs<T> {
    pub features: Array2<T>,
    pub logits: Array2<T>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    input_dims: (usize, usize, usize, usize),
    block_cols: Vec<Array2<T>>,
    block_act: Vec<Array4<T>>,
    flat: Array2<T>,
}

/// Builds the desk-scale CNN: conv blocks with ELU and 2x2 average pooling,
/// a projection to `feature_dim` with ELU, and one affine classifier layer.
pub fn build_small_cnn(input_shape: [usize; 3], num_classes: usize, seed: Seed) -> Result<Model> {
    Model::new(Architecture::small_cnn(input_shape, num_classes), seed)
}

impl<T: Scalar> Model<T> {
    pub fn new(arch: Architecture, seed: Seed) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed.rng();
        let mut in_c = arch.input_shape[2];
        let mut blocks = Vec::with_capacity(arch.conv_channels.len());
        for &out_c in &arch.conv_channels {
            blocks.push(Conv3x3::init(in_c, out_c, &mut rng));
            in_c = out_c;
        }
        let flat = arch.flat_dim();
        let projection = Dense::init(flat, arch.feature_dim, (6.0 / flat as f64).sqrt(), &mut rng);
        let head = Dense::init(arch.feature_dim, arch.num_classes, 1.0 / (arch.feature_dim as f64).sqrt(), &mut rng);
        Ok(Self { arch, blocks, projection, head })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            blocks: self.blocks.iter().map(Conv3x3::zeros_like).collect(),
            projection: self.projection.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// Same parameters in another float type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let c2 = |a: &Array2<T>| a.mapv(|v| cast::<U>(v.to_f64().expect("finite")));
        let c1 = |a: &ndarray::Array1<T>| a.mapv(|v| cast::<U>(v.to_f64().expect("finite")));
        Model {
            arch: self.arch.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Conv3x3 {
                    in_channels: b.in_channels,
                    out_channels: b.out_channels,
                    weight: c2(&b.weight),
                    bias: c1(&b.bias),
                })
                .collect(),
            projection: Dense { weight: c2(&self.projection.weight), bias: c1(&self.projection.bias) },
            head: Dense { weight: c2(&self.head.weight), bias: c1(&self.head.bias) },
        }
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.weight"), b.weight.view().into_dyn()));
            out.push((format!("block{i}.bias"), b.bias.view().into_dyn()));
        }
        out.push(("projection.weight".into(), self.projection.weight.view().into_dyn()));
        out.push(("projection.bias".into(), self.projection.bias.view().into_dyn()));
        out.push(("head.weight".into(), self.head.weight.view().into_dyn()));
        out.push(("head.bias".into(), self.head.bias.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut out = Vec::new();
        for b in self.blocks.iter_mut() {
            out.push(b.weight.view_mut().into_dyn());
            out.push(b.bias.view_mut().into_dyn());
        }
        out.push(self.projection.weight.view_mut().into_dyn());
        out.push(self.projection.bias.view_mut().into_dyn());
        out.push(self.head.weight.view_mut().into_dyn());
        out.push(self.head.bias.view_mut().into_dyn());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn check_input(&self, dims: (usize, usize, usize, usize)) -> Result<()> {
        let [w, h, c] = self.arch.input_shape;
        if (dims.1, dims.2, dims.3) != (w, h, c) {
            return Err(Error::Shape(format!(
                "model expects {w}x{h}x{c} images, got {}x{}x{}",
                dims.1, dims.2, dims.3
            )));
        }
        Ok(())
    }

    /// Extractor output only.
    pub fn extract(&self, x: ArrayView4<T>) -> Result<Array2<T>> {
        Ok(self.forward(x)?.0.features)
    }

    pub fn forward(&self, x: ArrayView4<T>) -> Result<(Outputs<T>, ForwardCache<T>)> {
        self.check_input(x.dim())?;
        let input_dims = x.dim();
        let mut block_cols = Vec::with_capacity(self.blocks.len());
        let mut block_act = Vec::with_capacity(self.blocks.len());
        let mut h: Option<Array4<T>> = None;
        for block in &self.blocks {
            let (mut a, cols) = match &h {
                None => block.forward(x.view()),
                Some(prev) => block.forward(prev.view()),
            };
            elu_inplace(&mut a);
            let pooled = avg_pool2(&a);
            block_cols.push(cols);
            block_act.push(a);
            h = Some(pooled);
        }
        let h = h.expect("at least one block");
        let n = h.dim().0;
        let flat = h.into_shape_with_order((n, self.arch.flat_dim())).expect("flatten");
        let mut features = self.projection.forward(flat.view());
        elu_inplace(&mut features);
        let logits = self.head.forward(features.view());
        Ok((Outputs { features, logits }, ForwardCache { input_dims, block_cols, block_act, flat }))
    }

    /// Backpropagates gradients of a scalar objective given with respect to the
    /// extractor features and/or the logits. Returns parameter gradients when
    /// `want_params` and the input gradient when `want_input`.
    pub fn backward(
        &self,
        outputs: &Outputs<T>,
        cache: &ForwardCache<T>,
        d_features: Option<&Array2<T>>,
        d_logits: Option<&Array2<T>>,
        want_params: bool,
        want_input: bool,
    ) -> (Option<Model<T>>, Option<Array4<T>>) {
        let mut grads = want_params.then(|| self.zeros_like());
        let mut d_feat = match d_features {
            Some(d) => d.clone(),
            None => Array2::zeros(outputs.features.raw_dim()),
        };
        if let Some(dl) = d_logits {
            if let Some(g) = grads.as_mut() {
                let (w, b) = self.head.backward_params(outputs.features.view(), dl);
                g.head.weight = w;
                g.head.bias = b;
            }
            d_feat += &self.head.backward_input(dl);
        }
        elu_backward_inplace(&mut d_feat, &outputs.features);
        if let Some(g) = grads.as_mut() {
            let (w, b) = self.projection.backward_params(cache.flat.view(), &d_feat);
            g.projection.weight = w;
            g.projection.bias = b;
        }
        if !want_input && !want_params {
            return (None, None);
        }
        let d_flat = self.projection.backward_input(&d_feat);
        let last = cache.block_act.last().expect("blocks");
        let (n, a, b, c) = last.dim();
        let mut d_h = d_flat.into_shape_with_order((n, a / 2, b / 2, c)).expect("unflatten");
        let mut d_input = None;
        for i in (0..self.blocks.len()).rev() {
            let act = &cache.block_act[i];
            let mut d_act = avg_pool2_backward(&d_h, act.dim());
            elu_backward_inplace(&mut d_act, act);
            let in_dims = if i == 0 { cache.input_dims } else { cache.block_act[i - 1].dim() };
            let in_dims = if i == 0 { in_dims } else { (in_dims.0, in_dims.1 / 2, in_dims.2 / 2, in_dims.3) };
            let need_in = i > 0 || want_input;
            let (p, d_in) = self.blocks[i].backward(&d_act, &cache.block_cols[i], in_dims, need_in, want_params);
            if let (Some(g), Some((w, bias))) = (grads.as_mut(), p) {
                g.blocks[i].weight = w;
                g.blocks[i].bias = bias;
            }
            match d_in {
                Some(d) if i > 0 => d_h = d,
                other => d_input = other,
            }
        }
        (grads, d_input)
    }
}

const INFERENCE_CHUNK: usize = 256;

impl Model<f32> {
    /// Features and logits for a whole dataset, computed in fixed-size chunks.
    pub fn infer(&self, images: &ImageTensor) -> Result<Outputs<f32>> {
        let n = images.len();
        let chunks: Vec<(usize, usize)> =
            (0..n).step_by(INFERENCE_CHUNK).map(|s| (s, (s + INFERENCE_CHUNK).min(n))).collect();
        let parts = chunks
            .par_iter()
            .map(|&(s, e)| {
                let view = images.view();
                let chunk = view.slice_axis(Axis(0), (s..e).into());
                self.forward(chunk).map(|(o, _)| o)
            })
            .collect::<Result<Vec<_>>>()?;
        if parts.is_empty() {
            return Ok(Outputs {
                features: Array2::zeros((0, self.feature_dim())),
                logits: Array2::zeros((0, self.num_classes())),
            });
        }
        let feats: Vec<_> = parts.iter().map(|o| o.features.view()).collect();
        let logits: Vec<_> = parts.iter().map(|o| o.logits.view()).collect();
        Ok(Outputs {
            features: ndarray::concatenate(Axis(0), &feats).expect("same width"),
            logits: ndarray::concatenate(Axis(0), &logits).expect("same width"),
        })
    }

    pub fn logits(&self, images: &ImageTensor) -> Result<Array2<f32>> {
        Ok(self.infer(images)?.logits)
    }

    /// Softmax confidences in double precision.
    pub fn confidences(&self, images: &ImageTensor) -> Result<ConfidenceMatrix> {
        Ok(ConfidenceMatrix::from_logits(&self.logits(images)?.mapv(f64::from)))
    }

    /// `argmax softmax(h(g(x)))`, ties to the smallest class.
    pub fn predict(&self, images: &ImageTensor) -> Result<Vec<u32>> {
        Ok(argmax_rows(&self.logits(images)?))
    }
}

/// Row-wise argmax; the first maximal index wins.
pub fn argmax_rows<T: PartialOrd + Copy>(m: &Array2<T>) -> Vec<u32> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_shift_suite, SyntheticConfig};

    #[test]
    fn same_seed_same_parameters() {
        let a = build_small_cnn([16, 16, 3], 10, Seed(11)).unwrap();
        let b = build_small_cnn([16, 16, 3], 10, Seed(11)).unwrap();
        let c = build_small_cnn([16, 16, 3], 10, Seed(12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn forward_shapes() {
        let m = build_small_cnn([16, 16, 3], 10, Seed(1)).unwrap();
        let x = ImageTensor::new(Array4::from_elem((5, 16, 16, 3), 0.5)).unwrap();
        let out = m.infer(&x).unwrap();
        assert_eq!(out.logits.dim(), (5, 10));
        assert_eq!(out.features.dim(), (5, 128));
        assert_eq!(m.predict(&x).unwrap().len(), 5);
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let m = build_small_cnn([16, 16, 3], 10, Seed(1)).unwrap();
        let x = ImageTensor::new(Array4::from_elem((1, 8, 8, 3), 0.5)).unwrap();
        assert!(matches!(m.infer(&x), Err(Error::Shape(_))));
        assert!(build_small_cnn([2, 2, 1], 3, Seed(0)).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        let m = ndarray::arr2(&[[0.2, 0.5, 0.5], [1.0, 1.0, 0.0]]);
        assert_eq!(argmax_rows(&m), vec![1, 0]);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let cfg = SyntheticConfig { samples_per_domain: 1000, third_party_samples: 0, ..Default::default() };
        let suite = make_synthetic_shift_suite(Seed(21), &cfg).unwrap();
        // A single untrained net collapses onto a few classes, so its accuracy is
        // a coin flip on the class alignment; the average over inits is chance.
        let accs: Vec<f64> = (0..10)
            .map(|s| evaluate_accuracy(&build_small_cnn([16, 16, 3], 10, Seed(s)).unwrap(), &suite.sources[0]).unwrap())
            .collect();
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 10.0).abs() <= 5.0, "untrained accuracies {accs:?}");
    }

    #[test]
    fn batch_partition_does_not_change_logits() {
        let suite = make_synthetic_shift_suite(
            Seed(2),
            &SyntheticConfig { samples_per_domain: 300, third_party_samples: 0, ..Default::default() },
        )
        .unwrap();
        let m = build_small_cnn([16, 16, 3], 10, Seed(1)).unwrap();
        let full = m.logits(&suite.target.images).unwrap();
        let part = m.logits(&suite.target.images.slice(100, 300)).unwrap();
        assert_eq!(full.slice(ndarray::s![100..300, ..]), part);
    }
}
