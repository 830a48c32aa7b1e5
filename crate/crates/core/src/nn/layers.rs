//! Layers with hand-written backward passes. Activations are channel-last
//! `(n, a, b, c)`; convolutions are lowered to one matrix product via im2col.

use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{cast, Scalar};

/// Weight and bias gradients of a layer.
pub type ParamGrads<T> = (Array2<T>, Array1<T>);

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(9 * in_channels, out_channels)`, rows ordered `(ky, kx, c)`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `(inputs, outputs)`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

fn uniform<T: Scalar>(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || cast(rng.random_range(-bound..bound)))
}

impl<T: Scalar> Conv3x3<T> {
    pub fn init(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = 9 * in_channels;
        Self {
            in_channels,
            out_channels,
            weight: uniform(fan_in, out_channels, (6.0 / fan_in as f64).sqrt(), rng),
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: ArrayView4<T>) -> (Array4<T>, Array2<T>) {
        let (n, a, b, _) = x.dim();
        let cols = im2col(x);
        let mut out = cols.dot(&self.weight);
        out += &self.bias;
        let out = out.into_shape_with_order((n, a, b, self.out_channels)).expect("conv output shape");
        (out, cols)
    }

    /// Returns `((d_weight, d_bias), d_input)`; the input gradient is skipped when not requested.
    pub fn backward(
        &self,
        grad_out: &Array4<T>,
        cols: &Array2<T>,
        input_dims: (usize, usize, usize, usize),
        want_input: bool,
        want_params: bool,
    ) -> (Option<ParamGrads<T>>, Option<Array4<T>>) {
        let (n, a, b, oc) = grad_out.dim();
        let g =
            grad_out.as_standard_layout().into_owned().into_shape_with_order((n * a * b, oc)).expect("conv grad shape");
        let params = want_params.then(|| (cols.t().dot(&g), g.sum_axis(Axis(0))));
        let input = want_input.then(|| col2im(g.dot(&self.weight.t()).view(), input_dims));
        (params, input)
    }
}

impl<T: Scalar> Dense<T> {
    pub fn init(inputs: usize, outputs: usize, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        Self { weight: uniform(inputs, outputs, bound, rng), bias: Array1::zeros(outputs) }
    }

    pub fn zeros_like(&self) -> Self {
        Self { weight: Array2::zeros(self.weight.raw_dim()), bias: Array1::zeros(self.bias.raw_dim()) }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut out = x.dot(&self.weight);
        out += &self.bias;
        out
    }

    pub fn backward_params(&self, x: ArrayView2<T>, grad_out: &Array2<T>) -> (Array2<T>, Array1<T>) {
        (x.t().dot(grad_out), grad_out.sum_axis(Axis(0)))
    }

    pub fn backward_input(&self, grad_out: &Array2<T>) -> Array2<T> {
        grad_out.dot(&self.weight.t())
    }
}

pub fn im2col<T: Scalar>(x: ArrayView4<T>) -> Array2<T> {
    let (n, a, b, c) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let width = 9 * c;
    let mut cols = vec![T::zero(); n * a * b * width];
    for i in 0..n {
        for p in 0..a {
            for q in 0..b {
                let row = ((i * a + p) * b + q) * width;
                for ky in 0..3 {
                    let pp = p as isize + ky as isize - 1;
                    if pp < 0 || pp >= a as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let qq = q as isize + kx as isize - 1;
                        if qq < 0 || qq >= b as isize {
                            continue;
                        }
                        let from = ((i * a + pp as usize) * b + qq as usize) * c;
                        let to = row + (ky * 3 + kx) * c;
                        cols[to..to + c].copy_from_slice(&src[from..from + c]);
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((n * a * b, width), cols).expect("im2col shape")
}

pub fn col2im<T: Scalar>(cols: ArrayView2<T>, dims: (usize, usize, usize, usize)) -> Array4<T> {
    let (n, a, b, c) = dims;
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let width = 9 * c;
    let mut out = vec![T::zero(); n * a * b * c];
    for i in 0..n {
        for p in 0..a {
            for q in 0..b {
                let row = ((i * a + p) * b + q) * width;
                for ky in 0..3 {
                    let pp = p as isize + ky as isize - 1;
                    if pp < 0 || pp >= a as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let qq = q as isize + kx as isize - 1;
                        if qq < 0 || qq >= b as isize {
                            continue;
                        }
                        let to = ((i * a + pp as usize) * b + qq as usize) * c;
                        let from = row + (ky * 3 + kx) * c;
                        for ch in 0..c {
                            out[to + ch] += src[from + ch];
                        }
                    }
                }
            }
        }
    }
    Array4::from_shape_vec(dims, out).expect("col2im shape")
}

/// ELU with alpha = 1, applied in place.
pub fn elu_inplace<T: Scalar, D: ndarray::Dimension>(x: &mut ndarray::Array<T, D>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { v.exp_m1() });
}

/// Multiplies `grad` by the ELU derivative, recovered from the activation output.
pub fn elu_backward_inplace<T: Scalar, D: ndarray::Dimension>(
    grad: &mut ndarray::Array<T, D>,
    output: &ndarray::Array<T, D>,
) {
    ndarray::Zip::from(grad).and(output).for_each(|g, &y| {
        if y <= T::zero() {
            *g *= y + T::one();
        }
    });
}

/// 2x2 average pooling with stride 2; trailing odd rows/columns are dropped.
pub fn avg_pool2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (n, a, b, c) = x.dim();
    let (oa, ob) = (a / 2, b / 2);
    let quarter: T = cast(0.25);
    Array4::from_shape_fn((n, oa, ob, c), |(i, p, q, ch)| {
        let (p2, q2) = (2 * p, 2 * q);
        (x[[i, p2, q2, ch]] + x[[i, p2 + 1, q2, ch]] + x[[i, p2, q2 + 1, ch]] + x[[i, p2 + 1, q2 + 1, ch]]) * quarter
    })
}

pub fn avg_pool2_backward<T: Scalar>(grad: &Array4<T>, input_dims: (usize, usize, usize, usize)) -> Array4<T> {
    let quarter: T = cast(0.25);
    let (_, oa, ob, _) = grad.dim();
    Array4::from_shape_fn(input_dims, |(i, p, q, ch)| {
        let (pp, qq) = (p / 2, q / 2);
        if pp < oa && qq < ob {
            grad[[i, pp, qq, ch]] * quarter
        } else {
            T::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = crate::data::Seed(1).rng();
        let conv: Conv3x3<f64> = Conv3x3::init(2, 3, &mut rng);
        let x = Array::from_shape_fn((2, 4, 5, 2), |(i, p, q, c)| ((i * 7 + p * 3 + q * 5 + c) % 11) as f64 / 11.0);
        let (out, _) = conv.forward(x.view());
        for i in 0..2 {
            for p in 0..4 {
                for q in 0..5 {
                    for o in 0..3 {
                        let mut acc = conv.bias[o];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (pp, qq) = (p as isize + ky - 1, q as isize + kx - 1);
                                if pp < 0 || qq < 0 || pp >= 4 || qq >= 5 {
                                    continue;
                                }
                                for c in 0..2 {
                                    acc += x[[i, pp as usize, qq as usize, c]]
                                        * conv.weight[[((ky * 3 + kx) as usize) * 2 + c, o]];
                                }
                            }
                        }
                        assert!((acc - out[[i, p, q, o]]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let x = Array::from_shape_fn((1, 3, 3, 2), |(_, p, q, c)| (p * 6 + q * 2 + c) as f64);
        let y = Array::from_shape_fn((9, 18), |(r, k)| ((r * 5 + k * 3) % 7) as f64 - 3.0);
        let lhs: f64 = (&im2col(x.view()) * &y).sum();
        let rhs: f64 = (&x * &col2im(y.view(), (1, 3, 3, 2))).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn pool_backward_is_adjoint() {
        let x = Array::from_shape_fn((1, 5, 4, 1), |(_, p, q, _)| (p * 4 + q) as f64);
        let g = Array::from_shape_fn((1, 2, 2, 1), |(_, p, q, _)| (p * 2 + q + 1) as f64);
        let lhs: f64 = (&avg_pool2(&x) * &g).sum();
        let rhs: f64 = (&x * &avg_pool2_backward(&g, (1, 5, 4, 1))).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
