use ndarray::{Array2, ArrayView2, Axis};

use super::{cast, Scalar};
use crate::error::{Error, Result};

/// Lower bound applied to probabilities inside an explicit logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn log_softmax_rows<T: Scalar>(logits: ArrayView2<T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows<T: Scalar>(logits: ArrayView2<T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Mean cross-entropy of `labels` under `softmax(logits)`, and its gradient
/// with respect to the logits.
pub fn cross_entropy_mean<T: Scalar>(logits: ArrayView2<T>, labels: &[u32]) -> (T, Array2<T>) {
    let n = logits.nrows();
    assert_eq!(n, labels.len(), "one label per row");
    let log_p = log_softmax_rows(logits);
    let inv_n: T = cast(1.0 / n.max(1) as f64);
    let mut loss = T::zero();
    let mut grad = log_p.mapv(|v| v.exp());
    for (i, &y) in labels.iter().enumerate() {
        loss -= log_p[[i, y as usize]];
        grad[[i, y as usize]] -= T::one();
    }
    grad.mapv_inplace(|v| v * inv_n);
    (loss * inv_n, grad)
}

/// Row-stochastic `(n, K)` matrix of class confidences.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMatrix(Array2<f64>);

impl ConfidenceMatrix {
    pub const ROW_TOLERANCE: f64 = 1e-6;

    /// Validates nonnegativity and unit row sums within `tolerance`.
    pub fn new(m: Array2<f64>, tolerance: f64) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("confidences must be finite and nonnegative".into()));
        }
        for (j, row) in m.axis_iter(Axis(0)).enumerate() {
            let s = row.sum();
            if (s - 1.0).abs() > tolerance {
                return Err(Error::InvalidInput(format!("row {j} sums to {s}, expected 1")));
            }
        }
        Ok(Self(m))
    }

    pub fn from_logits(logits: &Array2<f64>) -> Self {
        Self(softmax_rows(logits.view()))
    }

    #[cfg(test)]
    pub(crate) fn from_raw(m: Array2<f64>) -> Self {
        Self(m)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn argmax(&self) -> Vec<u32> {
        super::argmax_rows(&self.0)
    }
}
