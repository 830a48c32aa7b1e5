//! Scalar objectives over model outputs and their input gradients.

use ndarray::{Array2, Array4, ArrayView4};

use super::{cross_entropy_mean, Model, Outputs, Scalar};
use crate::error::{Error, Result};

/// Partial derivatives of an objective. `input` holds any direct dependence on
/// the input pixels; `features` and `logits` are backpropagated through the model.
#[derive(Debug, Clone)]
pub struct ObjectiveGrad<T> {
    pub input: Option<Array4<T>>,
    pub features: Option<Array2<T>>,
    pub logits: Option<Array2<T>>,
}

impl<T> Default for ObjectiveGrad<T> {
    fn default() -> Self {
        Self { input: None, features: None, logits: None }
    }
}

pub trait Objective<T: Scalar> {
    fn name(&self) -> &str;

    fn value(&self, input: ArrayView4<T>, outputs: &Outputs<T>) -> Result<T>;

    /// Non-differentiable objectives return [`Error::UnsupportedObjective`].
    fn gradient(&self, input: ArrayView4<T>, outputs: &Outputs<T>) -> Result<ObjectiveGrad<T>>;
}

/// Gradient of `objective(model(x))` with respect to `x`. Model parameters are untouched.
pub fn grad_wrt_input<T: Scalar>(
    model: &Model<T>,
    objective: &dyn Objective<T>,
    x: ArrayView4<T>,
) -> Result<Array4<T>> {
    let (outputs, cache) = model.forward(x)?;
    let grad = objective.gradient(x, &outputs)?;
    let mut total = match (grad.features.is_some() || grad.logits.is_some()).then(|| {
        model
            .backward(&outputs, &cache, grad.features.as_ref(), grad.logits.as_ref(), false, true)
            .1
            .expect("input gradient requested")
    }) {
        Some(g) => g,
        None => Array4::zeros(x.raw_dim()),
    };
    if let Some(direct) = grad.input {
        total += &direct;
    }
    Ok(total)
}

/// `sum(x)`
#[derive(Debug, Clone, Copy, Default)]
pub struct SumOfInputs;

impl<T: Scalar> Objective<T> for SumOfInputs {
    fn name(&self) -> &str {
        "sum_of_inputs"
    }

    fn value(&self, input: ArrayView4<T>, _: &Outputs<T>) -> Result<T> {
        Ok(input.sum())
    }

    fn gradient(&self, input: ArrayView4<T>, _: &Outputs<T>) -> Result<ObjectiveGrad<T>> {
        Ok(ObjectiveGrad { input: Some(Array4::ones(input.raw_dim())), ..Default::default() })
    }
}

/// `0.5 * ||x||^2`
#[derive(Debug, Clone, Copy, Default)]
pub struct HalfSquaredNorm;

impl<T: Scalar> Objective<T> for HalfSquaredNorm {
    fn name(&self) -> &str {
        "half_squared_norm"
    }

    fn value(&self, input: ArrayView4<T>, _: &Outputs<T>) -> Result<T> {
        let half = T::from_f64(0.5).expect("float");
        Ok(input.iter().map(|&v| v * v).sum::<T>() * half)
    }

    fn gradient(&self, input: ArrayView4<T>, _: &Outputs<T>) -> Result<ObjectiveGrad<T>> {
        Ok(ObjectiveGrad { input: Some(input.to_owned()), ..Default::default() })
    }
}

/// Mean cross-entropy of the logits against fixed labels.
#[derive(Debug, Clone)]
pub struct CrossEntropyObjective {
    pub labels: Vec<u32>,
}

impl<T: Scalar> Objective<T> for CrossEntropyObjective {
    fn name(&self) -> &str {
        "cross_entropy"
    }

    fn value(&self, _: ArrayView4<T>, outputs: &Outputs<T>) -> Result<T> {
        check_rows(outputs.logits.nrows(), self.labels.len())?;
        Ok(cross_entropy_mean(outputs.logits.view(), &self.labels).0)
    }

    fn gradient(&self, _: ArrayView4<T>, outputs: &Outputs<T>) -> Result<ObjectiveGrad<T>> {
        check_rows(outputs.logits.nrows(), self.labels.len())?;
        let (_, g) = cross_entropy_mean(outputs.logits.view(), &self.labels);
        Ok(ObjectiveGrad { logits: Some(g), ..Default::default() })
    }
}

/// Fraction of argmax-correct rows. Piecewise constant, so it has no usable gradient.
#[derive(Debug, Clone)]
pub struct ArgmaxAccuracy {
    pub labels: Vec<u32>,
}

impl<T: Scalar> Objective<T> for ArgmaxAccuracy {
    fn name(&self) -> &str {
        "argmax_accuracy"
    }

    fn value(&self, _: ArrayView4<T>, outputs: &Outputs<T>) -> Result<T> {
        check_rows(outputs.logits.nrows(), self.labels.len())?;
        let pred = super::argmax_rows(&outputs.logits);
        let hits = pred.iter().zip(&self.labels).filter(|(p, y)| p == y).count();
        Ok(T::from_f64(hits as f64 / self.labels.len().max(1) as f64).expect("float"))
    }

    fn gradient(&self, _: ArrayView4<T>, _: &Outputs<T>) -> Result<ObjectiveGrad<T>> {
        Err(Error::UnsupportedObjective(<Self as Objective<T>>::name(self).to_string()))
    }
}

fn check_rows(rows: usize, labels: usize) -> Result<()> {
    if rows != labels {
        return Err(Error::Shape(format!("{labels} labels for {rows} outputs")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Seed;
    use crate::nn::Architecture;
    use ndarray::Array;

    fn tiny() -> Model<f64> {
        let arch = Architecture { input_shape: [4, 4, 2], conv_channels: vec![3, 4], feature_dim: 6, num_classes: 3 };
        Model::new(arch, Seed(3)).unwrap()
    }

    fn input() -> Array4<f64> {
        Array::from_shape_fn((2, 4, 4, 2), |(i, p, q, c)| ((i * 13 + p * 5 + q * 3 + c * 7) % 17) as f64 / 17.0)
    }

    #[test]
    fn sum_of_inputs_gradient_is_ones() {
        let g = grad_wrt_input(&tiny(), &SumOfInputs, input().view()).unwrap();
        assert!(g.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let x = input();
        let g = grad_wrt_input(&tiny(), &HalfSquaredNorm, x.view()).unwrap();
        assert_eq!(g, x);
    }

    #[test]
    fn non_differentiable_objective_is_rejected() {
        let obj = ArgmaxAccuracy { labels: vec![0, 1] };
        assert!(matches!(grad_wrt_input(&tiny(), &obj, input().view()), Err(Error::UnsupportedObjective(_))));
    }

    #[test]
    fn cross_entropy_input_gradient_matches_differences() {
        let model = tiny();
        let obj = CrossEntropyObjective { labels: vec![2, 0] };
        let x = input();
        let g = grad_wrt_input(&model, &obj, x.view()).unwrap();
        let h = 1e-5;
        for idx in [(0, 0, 0, 0), (0, 1, 2, 1), (1, 3, 3, 0), (1, 2, 1, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let f = |v: &Array4<f64>| obj.value(v.view(), &model.forward(v.view()).unwrap().0).unwrap();
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-7 * (1.0 + fd.abs()), "{fd} vs {}", g[idx]);
        }
    }
}
