//! Label refinement and centroid reassignment.
//!
//! Refinement divides every confidence by the square root of its class's total
//! mass over the whole dataset and renormalises each row, which evens out class
//! assignment. Pseudo-labels then come from the nearest (cosine) centroid, where
//! centroids are feature means weighted by the refined confidences.

use ndarray::{Array2, ArrayView2, Axis};

use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::nn::{ConfidenceMatrix, Model};

/// Divisor used for a class column with zero total mass.
pub const EMPTY_COLUMN_EPS: f64 = 1e-12;
/// Total refined weight below which a centroid counts as empty.
pub const EMPTY_CENTROID_MASS: f64 = 1e-12;
/// Cosine distances closer than this are treated as equal.
pub const TIE_TOLERANCE: f64 = 1e-12;
/// Row-sum tolerance accepted on refinement input.
pub const INPUT_ROW_TOLERANCE: f64 = 1e-4;

/// Output of [`depict_refine`]: rows sum to one, entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedConfidence(ConfidenceMatrix);

impl RefinedConfidence {
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn argmax(&self) -> Vec<u32> {
        self.0.argmax()
    }

    pub fn into_confidence(self) -> ConfidenceMatrix {
        self.0
    }
}

/// `q_jk = (p_jk / sqrt(sum_j' p_j'k)) / sum_k' (p_jk' / sqrt(sum_j' p_j'k'))`,
/// with column sums taken over every row of `p`.
pub fn depict_refine(p: &ConfidenceMatrix) -> Result<RefinedConfidence> {
    let p = p.view();
    if p.nrows() == 0 {
        return Err(Error::InvalidInput("refinement needs at least one row".into()));
    }
    for (j, row) in p.axis_iter(Axis(0)).enumerate() {
        let s = row.sum();
        if s == 0.0 {
            return Err(Error::InvalidInput(format!("row {j} is all zero")));
        }
        if (s - 1.0).abs() > INPUT_ROW_TOLERANCE {
            return Err(Error::InvalidInput(format!("row {j} sums to {s}")));
        }
    }
    let divisors: Vec<f64> =
        p.sum_axis(Axis(0)).iter().map(|&mass| if mass > 0.0 { mass.sqrt() } else { EMPTY_COLUMN_EPS }).collect();
    let mut q = p.to_owned();
    for mut row in q.rows_mut() {
        for (v, d) in row.iter_mut().zip(&divisors) {
            *v /= d;
        }
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    Ok(RefinedConfidence(ConfidenceMatrix::new(q, ConfidenceMatrix::ROW_TOLERANCE)?))
}

/// Per-class feature centroids weighted by refined confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    /// `(K, F)`; rows of empty classes are zero.
    pub rho: Array2<f64>,
    pub empty: Vec<bool>,
}

impl Centroids {
    pub fn non_empty(&self) -> usize {
        self.empty.iter().filter(|e| !**e).count()
    }
}

/// `rho_k = sum_j q_jk f_j / sum_j q_jk`.
pub fn weighted_centroids(features: ArrayView2<f64>, q_hat: &RefinedConfidence) -> Result<Centroids> {
    weighted_centroids_raw(features, q_hat.view())
}

fn weighted_centroids_raw(features: ArrayView2<f64>, weights: ArrayView2<f64>) -> Result<Centroids> {
    if features.nrows() != weights.nrows() {
        return Err(Error::Shape(format!("{} feature rows for {} confidence rows", features.nrows(), weights.nrows())));
    }
    let mut rho = weights.t().dot(&features);
    let mass = weights.sum_axis(Axis(0));
    let mut empty = Vec::with_capacity(mass.len());
    for (mut row, &m) in rho.rows_mut().into_iter().zip(mass.iter()) {
        if m < EMPTY_CENTROID_MASS {
            row.fill(0.0);
            empty.push(true);
        } else {
            row.mapv_inplace(|v| v / m);
            empty.push(false);
        }
    }
    Ok(Centroids { rho, empty })
}

/// `argmin_k (1 - cos(f_j, rho_k))` over non-empty centroids. Ties go to the
/// class with the larger refined confidence in `fallback`, then to the smallest
/// index. Rows with zero norm take the argmax of `fallback`.
pub fn cosine_assign(
    features: ArrayView2<f64>,
    centroids: &Centroids,
    fallback: &RefinedConfidence,
) -> Result<Vec<u32>> {
    if features.ncols() != centroids.rho.ncols() {
        return Err(Error::Shape("feature and centroid widths differ".into()));
    }
    if fallback.view().nrows() != features.nrows() {
        return Err(Error::Shape("fallback confidences do not match feature rows".into()));
    }
    let norms: Vec<f64> = centroids.rho.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let usable: Vec<usize> = (0..norms.len()).filter(|&k| !centroids.empty[k] && norms[k] > 0.0).collect();
    if usable.is_empty() {
        return Err(Error::EmptyCentroids);
    }
    let fallback_labels = fallback.argmax();
    let q = fallback.view();
    Ok(features
        .rows()
        .into_iter()
        .enumerate()
        .map(|(j, f)| {
            let fnorm = f.dot(&f).sqrt();
            if fnorm == 0.0 {
                return fallback_labels[j];
            }
            let dists: Vec<f64> =
                usable.iter().map(|&k| 1.0 - f.dot(&centroids.rho.row(k)) / (fnorm * norms[k])).collect();
            let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
            // Distances within TIE_TOLERANCE are tied: prefer the larger refined
            // confidence, then the smaller class index.
            let mut best: Option<usize> = None;
            for (&k, &d) in usable.iter().zip(&dists) {
                if d > min + TIE_TOLERANCE {
                    continue;
                }
                match best {
                    Some(b) if q[[j, k]] <= q[[j, b]] => {}
                    _ => best = Some(k),
                }
            }
            best.expect("at least one candidate") as u32
        })
        .collect())
}

/// Refine, cluster, reassign. Extra `iterations` recompute centroids from the
/// previous hard assignment (one-hot weights) and reassign.
pub fn pseudo_labels_from_outputs(
    features: ArrayView2<f64>,
    confidences: &ConfidenceMatrix,
    iterations: usize,
) -> Result<Vec<u32>> {
    let q_hat = depict_refine(confidences)?;
    let centroids = weighted_centroids(features, &q_hat)?;
    let mut labels = cosine_assign(features, &centroids, &q_hat)?;
    for _ in 1..iterations.max(1) {
        let k = confidences.ncols();
        let mut onehot = Array2::<f64>::zeros((labels.len(), k));
        for (j, &l) in labels.iter().enumerate() {
            onehot[[j, l as usize]] = 1.0;
        }
        let centroids = weighted_centroids_raw(features, onehot.view())?;
        labels = cosine_assign(features, &centroids, &q_hat)?;
    }
    Ok(labels)
}

/// Pseudo-labels for the whole target set from the model's own confidences and features.
pub fn pseudo_label_target(model: &Model, target: &ImageTensor, iterations: usize) -> Result<Vec<u32>> {
    let out = model.infer(target)?;
    let confidences = ConfidenceMatrix::from_logits(&out.logits.mapv(f64::from));
    pseudo_labels_from_outputs(out.features.mapv(f64::from).view(), &confidences, iterations)
}

/// Labels whose argmax falls on a single class; callers may want to warn.
pub fn is_degenerate(labels: &[u32]) -> bool {
    labels.windows(2).all(|w| w[0] == w[1])
}
