//! Small hand-differentiated building blocks: convolutions, pooling, affine
//! maps and the numerically stable scalar functions used by the losses.

pub mod conv;

use ndarray::{Array, Array1, Array2, ArrayView1, Dimension};
use rand::Rng;

pub use conv::{BasicBlock, Conv2d, ConvCache, MaxPool2d};

/// Borrowed view of one named parameter tensor.
pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamViewMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

/// Enumerates named parameter tensors in a fixed order.
pub trait Parameters {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>);
}

pub(crate) fn push<'a, D: Dimension>(out: &mut Vec<ParamView<'a>>, name: String, a: &'a Array<f64, D>) {
    out.push(ParamView {
        name,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("parameters are stored in standard layout"),
    });
}

pub(crate) fn push_mut<'a, D: Dimension>(out: &mut Vec<ParamViewMut<'a>>, name: String, a: &'a mut Array<f64, D>) {
    out.push(ParamViewMut {
        name,
        data: a.as_slice_mut().expect("parameters are stored in standard layout"),
    });
}

/// Uniform draw in `[-bound, bound]`.
pub(crate) fn uniform<D: Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(
    shape: Sh,
    bound: f64,
    rng: &mut impl Rng,
) -> Array<f64, D> {
    Array::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
}

/// Affine map `W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn init(out: usize, inp: usize, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / inp as f64).sqrt();
        Self {
            weight: uniform((out, inp), bound, rng),
            bias: Array1::zeros(out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `∂/∂x`.
    pub fn backward(&self, x: ArrayView1<f64>, dy: ArrayView1<f64>, grad: &mut Linear) -> Array1<f64> {
        add_outer(&mut grad.weight, dy, x);
        grad.bias += &dy;
        self.weight.t().dot(&dy)
    }
}

impl Parameters for Linear {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        push(out, format!("{prefix}.W"), &self.weight);
        push(out, format!("{prefix}.b"), &self.bias);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        push_mut(out, format!("{prefix}.W"), &mut self.weight);
        push_mut(out, format!("{prefix}.b"), &mut self.bias);
    }
}

/// `m += a bᵀ`
pub(crate) fn add_outer(m: &mut Array2<f64>, a: ArrayView1<f64>, b: ArrayView1<f64>) {
    for (mut row, &ai) in m.rows_mut().into_iter().zip(a.iter()) {
        if ai != 0.0 {
            row.scaled_add(ai, &b);
        }
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(x: ArrayView1<f64>) -> f64 {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax with the maximum subtracted before exponentiation.
pub fn softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = x.mapv(|v| (v - max).exp());
    let z = e.sum();
    e / z
}

/// Cross-entropy `-log softmax(logits)[target]` and its gradient with respect
/// to the logits.
pub fn cross_entropy(logits: ArrayView1<f64>, target: usize) -> (f64, Array1<f64>) {
    if logits[target] == f64::INFINITY {
        return (0.0, Array1::zeros(logits.len()));
    }
    let p = softmax(logits);
    let loss = log_sum_exp(logits) - logits[target];
    let mut grad = p;
    grad[target] -= 1.0;
    (loss.max(0.0), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert_eq!(softplus(-800.0), 0.0);
        assert_eq!(softplus(800.0), 800.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let (l, g) = cross_entropy(array![0.3, 0.3, 0.3, 0.3].view(), 2);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((g.sum()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_with_infinite_margin_is_zero() {
        let (l, _) = cross_entropy(array![f64::INFINITY, 0.0, -1.0].view(), 0);
        assert_eq!(l, 0.0);
        let (l, _) = cross_entropy(array![800.0, 0.0].view(), 0);
        assert_eq!(l, 0.0);
    }

    #[test]
    fn softmax_handles_large_scores() {
        let p = softmax(array![1000.0, 1000.0].view());
        assert_eq!(p, array![0.5, 0.5]);
    }
}
