//! Reference computations written independently of the library's vectorised
//! code, shared by the integration tests and the acceptance run.

#![allow(dead_code)]

use ndarray::{Array2, Array4};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sfuda_core::dat::FeatureKl;
use sfuda_core::data::ImageTensor;
use sfuda_core::nn::{cross_entropy_mean, grad_wrt_input, Model};

/// Central-difference step used for every gradient check.
pub const FD_STEP: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-stochastic `n x k` matrix with a random sharpness per row.
pub fn random_confidences(rng: &mut impl Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let temp: f64 = rng.random_range(0.2..4.0);
            let e: Vec<f64> = (0..k).map(|_| (rng.random_range(-3.0..3.0) / temp).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Column-balanced refinement, one entry at a time:
/// `q[j][k] = (p[j][k] / sqrt(col[k])) / sum over k' of (p[j][k'] / sqrt(col[k']))`.
pub fn depict_reference(p: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = p[0].len();
    let mut col = vec![0.0; k];
    for row in p {
        for c in 0..k {
            col[c] += row[c];
        }
    }
    let mut q = Vec::with_capacity(p.len());
    for row in p {
        let mut out = vec![0.0; k];
        let mut z = 0.0;
        for c in 0..k {
            out[c] = row[c] / col[c].sqrt();
            z += out[c];
        }
        for v in &mut out {
            *v /= z;
        }
        q.push(out);
    }
    q
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Mean over rows of `KL(softmax(reference_row) || softmax(row))`.
pub fn kl_reference(reference: &Array2<f64>, features: &Array2<f64>) -> f64 {
    let mut total = 0.0;
    for (r, f) in reference.rows().into_iter().zip(features.rows()) {
        let p = softmax(&r.to_vec());
        let q = softmax(&f.to_vec());
        total += p.iter().zip(&q).map(|(a, b)| a * (a.ln() - b.ln())).sum::<f64>();
    }
    total / reference.nrows() as f64
}

/// Mean negative log-likelihood of `labels` under row softmax of `logits`.
pub fn cross_entropy_reference(logits: &Array2<f64>, labels: &[u32]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        total -= softmax(&row.to_vec())[y as usize].ln();
    }
    total / labels.len() as f64
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `(coordinate, analytic, central difference)`
    pub samples: Vec<(usize, f64, f64)>,
}

impl GradCheck {
    pub fn max_relative_error(&self) -> f64 {
        self.samples.iter().map(|&(_, a, n)| relative_error(a, n)).fold(0.0, f64::max)
    }
}

fn central(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += FD_STEP;
    minus[i] -= FD_STEP;
    (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
}

fn as_f64_images(x: &ImageTensor) -> Array4<f64> {
    x.as_array().mapv(f64::from)
}

/// Input gradient of the feature KL from the single-precision model, against
/// central differences of the double-precision reference KL.
pub fn check_feature_kl_gradient(
    model: &Model,
    x_t: &ImageTensor,
    x_e: &ImageTensor,
    coords: usize,
    seed: u64,
) -> GradCheck {
    let objective = FeatureKl::new(model, x_t.view()).unwrap();
    let analytic = grad_wrt_input(model, &objective, x_e.view()).unwrap();
    let wide = model.cast::<f64>();
    let reference = wide.extract(as_f64_images(x_t).view()).unwrap();
    let dims = x_e.as_array().raw_dim();
    let f = |flat: &[f64]| {
        let x = Array4::from_shape_vec(dims, flat.to_vec()).unwrap();
        kl_reference(&reference, &wide.extract(x.view()).unwrap())
    };
    let x: Vec<f64> = as_f64_images(x_e).iter().cloned().collect();
    let flat_grad: Vec<f32> = analytic.iter().cloned().collect();
    let picks = sample(&mut rng(seed), x.len(), coords);
    GradCheck { samples: picks.iter().map(|i| (i, flat_grad[i] as f64, central(&f, &x, i))).collect() }
}

fn write_params(model: &mut Model<f64>, flat: &[f64]) {
    let mut offset = 0;
    for mut t in model.tensors_mut() {
        for v in t.iter_mut() {
            *v = flat[offset];
            offset += 1;
        }
    }
}

/// Parameter gradient of the mean cross-entropy from the single-precision
/// model, against central differences of the double-precision reference loss.
pub fn check_loss_gradient(model: &Model, x: &ImageTensor, labels: &[u32], coords: usize, seed: u64) -> GradCheck {
    let (out, cache) = model.forward(x.view()).unwrap();
    let (_, d_logits) = cross_entropy_mean(out.logits.view(), labels);
    let grads = model.backward(&out, &cache, None, Some(&d_logits), true, false).0.unwrap();
    let flat_grad: Vec<f64> =
        grads.tensors().iter().flat_map(|(_, t)| t.iter().map(|&v| v as f64).collect::<Vec<_>>()).collect();

    let wide = model.cast::<f64>();
    let params: Vec<f64> = wide.tensors().iter().flat_map(|(_, t)| t.iter().cloned().collect::<Vec<_>>()).collect();
    let images = as_f64_images(x);
    let f = |flat: &[f64]| {
        let mut m = wide.clone();
        write_params(&mut m, flat);
        cross_entropy_reference(&m.forward(images.view()).unwrap().0.logits, labels)
    };
    let picks = sample(&mut rng(seed), params.len(), coords);
    GradCheck { samples: picks.iter().map(|i| (i, flat_grad[i], central(&f, &params, i))).collect() }
}
