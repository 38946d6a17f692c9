//! 2-D convolution via im2col + GEMM, max pooling, and a residual block.
//! All tensors are channel-first `C × H × W`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;

use super::{push, push_mut, uniform, ParamView, ParamViewMut, Parameters};

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `out × in × kh × kw`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
}

fn out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

impl Conv2d {
    /// He-uniform weights (bound `√(6 / fan_in)`), zero bias.
    pub fn init(inp: usize, out: usize, kernel: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (inp * kernel * kernel) as f64;
        Self {
            weight: uniform((out, inp, kernel, kernel), (6.0 / fan_in).sqrt(), rng),
            bias: Array1::zeros(out),
            stride,
            pad,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        (out_len(h, kh, self.stride, self.pad), out_len(w, kw, self.stride, self.pad))
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (o, i, kh, kw) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * kh * kw))
            .expect("contiguous weight")
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let (_, _, kh, kw) = self.weight.dim();
        let (oh, ow) = self.output_size(h, w);
        let mut cols = Array2::<f64>::zeros((c * kh * kw, oh * ow));
        let xs = x.as_slice().expect("contiguous input");
        let cs = cols.as_slice_mut().expect("fresh array");
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((ci * kh + i) * kw + j) * oh * ow;
                    for oy in 0..oh {
                        let y = oy as isize * s + i as isize - p;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let src = (ci * h + y as usize) * w;
                        let dst = row + oy * ow;
                        for ox in 0..ow {
                            let xx = ox as isize * s + j as isize - p;
                            if xx >= 0 && xx < w as isize {
                                cs[dst + ox] = xs[src + xx as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, in_shape: (usize, usize, usize)) -> Array3<f64> {
        let (c, h, w) = in_shape;
        let (_, _, kh, kw) = self.weight.dim();
        let (oh, ow) = self.output_size(h, w);
        let mut x = Array3::<f64>::zeros((c, h, w));
        let xs = x.as_slice_mut().expect("fresh array");
        let cs = cols.as_slice().expect("contiguous cols");
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..c {
            for i in 0..kh {
                for j in 0..kw {
                    let row = ((ci * kh + i) * kw + j) * oh * ow;
                    for oy in 0..oh {
                        let y = oy as isize * s + i as isize - p;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let dst = (ci * h + y as usize) * w;
                        let src = row + oy * ow;
                        for ox in 0..ow {
                            let xx = ox as isize * s + j as isize - p;
                            if xx >= 0 && xx < w as isize {
                                xs[dst + xx as usize] += cs[src + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w);
        let cols = self.im2col(x);
        let mut y = self.weight_matrix().dot(&cols);
        for (mut row, &b) in y.rows_mut().into_iter().zip(self.bias.iter()) {
            row += b;
        }
        let y = y
            .into_shape_with_order((self.out_channels(), oh, ow))
            .expect("contiguous output");
        (y, ConvCache { cols, in_shape: x.dim() })
    }

    /// Accumulates `∂/∂weight` and `∂/∂bias` into `grad`; returns `∂/∂x`
    /// when `need_input_grad` is set.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dy: &Array3<f64>,
        grad: &mut Conv2d,
        need_input_grad: bool,
    ) -> Option<Array3<f64>> {
        let (o, oh, ow) = dy.dim();
        let dy2 = dy.view().into_shape_with_order((o, oh * ow)).expect("contiguous grad");
        let (_, i, kh, kw) = self.weight.dim();
        {
            let mut gw = grad
                .weight
                .view_mut()
                .into_shape_with_order((o, i * kh * kw))
                .expect("contiguous weight");
            general_mat_mul(1.0, &dy2, &cache.cols.t(), 1.0, &mut gw);
        }
        grad.bias += &dy2.sum_axis(Axis(1));
        if !need_input_grad {
            return None;
        }
        let dcols = self.weight_matrix().t().dot(&dy2);
        Some(self.col2im(&dcols, cache.in_shape))
    }
}

impl Parameters for Conv2d {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        push(out, format!("{prefix}.weight"), &self.weight);
        push(out, format!("{prefix}.bias"), &self.bias);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        push_mut(out, format!("{prefix}.weight"), &mut self.weight);
        push_mut(out, format!("{prefix}.bias"), &mut self.bias);
    }
}

pub(crate) fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// `dy ⊙ [y > 0]` where `y` is the post-activation output.
pub(crate) fn relu_backward(y: &Array3<f64>, dy: &mut Array3<f64>) {
    ndarray::Zip::from(dy).and(y).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool2d {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (out_len(h, self.kernel, self.stride, self.pad), out_len(w, self.kernel, self.stride, self.pad))
    }

    /// Returns the pooled map and, per output cell, the flat index of the
    /// winning input cell.
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Vec<usize>) {
        let (c, h, w) = x.dim();
        let (oh, ow) = self.output_size(h, w);
        let xs = x.as_slice().expect("contiguous input");
        let mut y = Array3::<f64>::zeros((c, oh, ow));
        let mut arg = vec![0usize; c * oh * ow];
        let ys = y.as_slice_mut().expect("fresh array");
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for i in 0..self.kernel as isize {
                        let yy = oy as isize * s + i - p;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for j in 0..self.kernel as isize {
                            let xx = ox as isize * s + j - p;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let idx = (ci * h + yy as usize) * w + xx as usize;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = (ci * oh + oy) * ow + ox;
                    ys[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        (y, arg)
    }

    pub fn backward(&self, argmax: &[usize], dy: &Array3<f64>, in_shape: (usize, usize, usize)) -> Array3<f64> {
        let mut dx = Array3::<f64>::zeros(in_shape);
        let dxs = dx.as_slice_mut().expect("fresh array");
        for (&i, &g) in argmax.iter().zip(dy.iter()) {
            dxs[i] += g;
        }
        dx
    }
}

/// Two 3×3 convolutions with an identity (or strided 1×1 projection)
/// shortcut: `relu(conv2(relu(conv1(x))) + shortcut(x))`. No normalisation
/// layers.
#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct BasicBlockCache {
    c1: ConvCache,
    h1: Array3<f64>,
    c2: ConvCache,
    sc: Option<ConvCache>,
    out: Array3<f64>,
}

impl BasicBlock {
    pub fn init(inp: usize, out: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let conv1 = Conv2d::init(inp, out, 3, stride, 1, rng);
        let conv2 = Conv2d::init(out, out, 3, 1, 1, rng);
        let shortcut = (stride != 1 || inp != out).then(|| Conv2d::init(inp, out, 1, stride, 0, rng));
        Self { conv1, conv2, shortcut }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            shortcut: self.shortcut.as_ref().map(Conv2d::zeros_like),
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, BasicBlockCache) {
        let (mut h1, c1) = self.conv1.forward(x);
        relu_inplace(&mut h1);
        let (mut out, c2) = self.conv2.forward(&h1);
        let sc = match &self.shortcut {
            Some(conv) => {
                let (s, cache) = conv.forward(x);
                out += &s;
                Some(cache)
            }
            None => {
                out += x;
                None
            }
        };
        relu_inplace(&mut out);
        (out.clone(), BasicBlockCache { c1, h1, c2, sc, out })
    }

    pub fn backward(&self, cache: &BasicBlockCache, dy: &Array3<f64>, grad: &mut BasicBlock, need_input_grad: bool) -> Option<Array3<f64>> {
        let mut d = dy.clone();
        relu_backward(&cache.out, &mut d);
        let mut dh1 = self
            .conv2
            .backward(&cache.c2, &d, &mut grad.conv2, true)
            .expect("input grad requested");
        relu_backward(&cache.h1, &mut dh1);
        let dx_main = self.conv1.backward(&cache.c1, &dh1, &mut grad.conv1, need_input_grad);
        let dx_short = match (&self.shortcut, &cache.sc, grad.shortcut.as_mut()) {
            (Some(conv), Some(c), Some(g)) => conv.backward(c, &d, g, need_input_grad),
            _ => need_input_grad.then_some(d),
        };
        match (dx_main, dx_short) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        }
    }
}

impl Parameters for BasicBlock {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        self.conv1.params(&format!("{prefix}.conv1"), out);
        self.conv2.params(&format!("{prefix}.conv2"), out);
        if let Some(s) = &self.shortcut {
            s.params(&format!("{prefix}.shortcut"), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        self.conv1.params_mut(&format!("{prefix}.conv1"), out);
        self.conv2.params_mut(&format!("{prefix}.conv2"), out);
        if let Some(s) = &mut self.shortcut {
            s.params_mut(&format!("{prefix}.shortcut"), out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn conv_oracle(conv: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (o, i, kh, kw) = conv.weight.dim();
        let (_, h, w) = x.dim();
        let (oh, ow) = conv.output_size(h, w);
        Array3::from_shape_fn((o, oh, ow), |(oc, oy, ox)| {
            let mut acc = conv.bias[oc];
            for ic in 0..i {
                for a in 0..kh {
                    for b in 0..kw {
                        let y = (oy * conv.stride + a) as isize - conv.pad as isize;
                        let xx = (ox * conv.stride + b) as isize - conv.pad as isize;
                        if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                            acc += conv.weight[[oc, ic, a, b]] * x[[ic, y as usize, xx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn im2col_conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (k, s, p) in [(3, 2, 1), (2, 1, 0), (1, 2, 0), (7, 2, 3)] {
            let mut conv = Conv2d::init(3, 4, k, s, p, &mut rng);
            conv.bias = uniform(4, 1.0, &mut rng);
            let x: Array3<f64> = uniform((3, 9, 9), 1.0, &mut rng);
            let (y, _) = conv.forward(&x);
            let oracle = conv_oracle(&conv, &x);
            assert_eq!(y.dim(), oracle.dim());
            for (a, b) in y.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::init(2, 3, 3, 2, 1, &mut rng);
        let x: Array3<f64> = uniform((2, 5, 5), 1.0, &mut rng);
        let (y, cache) = conv.forward(&x);
        let r: Array3<f64> = uniform(y.raw_dim(), 1.0, &mut rng);
        let mut g = conv.zeros_like();
        let dx = conv.backward(&cache, &r, &mut g, true).unwrap();
        let f = |x: &Array3<f64>| (conv.forward(x).0 * &r).sum();
        let eps = 1e-6;
        for idx in [[0, 0, 0], [1, 2, 3], [0, 4, 4]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = (f(&xp) - f(&xm)) / (2.0 * eps);
            assert!((num - dx[idx]).abs() < 1e-8, "{num} vs {}", dx[idx]);
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_winner() {
        let x = Array3::from_shape_vec((1, 2, 2), vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let pool = MaxPool2d { kernel: 2, stride: 2, pad: 0 };
        let (y, arg) = pool.forward(&x);
        assert_eq!(y[[0, 0, 0]], 5.0);
        let dx = pool.backward(&arg, &Array3::from_elem((1, 1, 1), 2.0), (1, 2, 2));
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 2.0, 0.0, 0.0]);
    }
}
