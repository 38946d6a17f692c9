//! Visual backbone: image → `D × G × G` feature map → `D`-dimensional global
//! embedding, plus the item-category classifier used to fine-tune it.

use ndarray::{Array1, Array3, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{AfrecError, Result};
use crate::nn::conv::{relu_backward, relu_inplace, BasicBlockCache};
use crate::nn::{cross_entropy, BasicBlock, Conv2d, ConvCache, Linear, MaxPool2d, ParamView, ParamViewMut, Parameters};

/// `D × G × G` map; `values[[d, y, x]]` is channel `d` at grid cell `(y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(pub Array3<f64>);

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.0.dim().0
    }

    pub fn grid(&self) -> usize {
        self.0.dim().1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalEmbedding(pub Array1<f64>);

/// Channel-wise mean over all grid positions.
pub fn global_average_pool(map: &FeatureMap) -> GlobalEmbedding {
    let (d, h, w) = map.0.dim();
    let flat = map.0.view().into_shape_with_order((d, h * w)).expect("contiguous map");
    GlobalEmbedding(flat.mean_axis(Axis(1)).expect("non-empty grid"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        relu: bool,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Residual {
        out: usize,
        stride: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub layers: Vec<LayerSpec>,
}

impl BackboneSpec {
    /// Four strided conv+ReLU blocks: 64×64 → 32 → 16 → 8 → 7×7 × `dim`.
    pub fn desk(dim: usize) -> Self {
        let conv = |out, kernel, stride, pad| LayerSpec::Conv { out, kernel, stride, pad, relu: true };
        Self {
            layers: vec![conv(8, 3, 2, 1), conv(16, 3, 2, 1), conv(32, 3, 2, 1), conv(dim, 2, 1, 0)],
        }
    }

    /// 18-layer residual network (stem, max-pool, four stages of two basic
    /// blocks): 224×224 → 7×7 × `dim`. Stage widths scale as `dim/8 … dim`.
    pub fn resnet18(dim: usize) -> Self {
        let w = |f: usize| (dim * f / 8).max(1);
        let mut layers = vec![
            LayerSpec::Conv { out: w(1), kernel: 7, stride: 2, pad: 3, relu: true },
            LayerSpec::MaxPool { kernel: 3, stride: 2, pad: 1 },
        ];
        for (stage, f) in [1, 2, 4, 8].into_iter().enumerate() {
            let stride = if stage == 0 { 1 } else { 2 };
            layers.push(LayerSpec::Residual { out: w(f), stride });
            layers.push(LayerSpec::Residual { out: w(f), stride: 1 });
        }
        Self { layers }
    }

    /// Two conv+ReLU layers for gradient checks: 8×8 → 4×4 → 2×2 × `dim`.
    pub fn micro(dim: usize) -> Self {
        Self {
            layers: vec![
                LayerSpec::Conv { out: 3, kernel: 3, stride: 2, pad: 1, relu: true },
                LayerSpec::Conv { out: dim, kernel: 3, stride: 2, pad: 1, relu: true },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { conv: Conv2d, relu: bool },
    MaxPool(MaxPool2d),
    Residual(BasicBlock),
}

enum LayerCache {
    Conv { cache: ConvCache, out: Option<Array3<f64>> },
    MaxPool { argmax: Vec<usize>, in_shape: (usize, usize, usize) },
    Residual(BasicBlockCache),
}

/// Activations retained by [`Backbone::forward`] for the backward pass.
pub struct BackboneCache {
    layers: Vec<LayerCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub image_size: usize,
    pub layers: Vec<Layer>,
}

impl Backbone {
    pub fn init(spec: &BackboneSpec, image_size: usize, rng: &mut impl Rng) -> Self {
        let mut channels = 3;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            layers.push(match *l {
                LayerSpec::Conv { out, kernel, stride, pad, relu } => {
                    let conv = Conv2d::init(channels, out, kernel, stride, pad, rng);
                    channels = out;
                    Layer::Conv { conv, relu }
                }
                LayerSpec::MaxPool { kernel, stride, pad } => Layer::MaxPool(MaxPool2d { kernel, stride, pad }),
                LayerSpec::Residual { out, stride } => {
                    let block = BasicBlock::init(channels, out, stride, rng);
                    channels = out;
                    Layer::Residual(block)
                }
            });
        }
        Self { image_size, layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            image_size: self.image_size,
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv { conv, relu } => Layer::Conv { conv: conv.zeros_like(), relu: *relu },
                    Layer::MaxPool(p) => Layer::MaxPool(*p),
                    Layer::Residual(b) => Layer::Residual(b.zeros_like()),
                })
                .collect(),
        }
    }

    /// Channel count `D` of the output map.
    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv { conv, .. } => Some(conv.out_channels()),
                Layer::Residual(b) => Some(b.conv2.out_channels()),
                Layer::MaxPool(_) => None,
            })
            .unwrap_or(3)
    }

    /// Side `G` of the output grid.
    pub fn output_grid(&self) -> usize {
        let mut s = self.image_size;
        for l in &self.layers {
            s = match l {
                Layer::Conv { conv, .. } => conv.output_size(s, s).0,
                Layer::MaxPool(p) => p.output_size(s, s).0,
                Layer::Residual(b) => b.conv1.output_size(s, s).0,
            };
        }
        s
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let expected = (3, self.image_size, self.image_size);
        if x.dim() != expected {
            return Err(AfrecError::shape(format!("{expected:?}"), format!("{:?}", x.dim())));
        }
        Ok(())
    }

    /// Forward pass on a channel-first `3 × S × S` image.
    pub fn forward(&self, x: &Array3<f64>) -> Result<(FeatureMap, BackboneCache)> {
        self.check_input(x)?;
        let mut h = x.as_standard_layout().into_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            match l {
                Layer::Conv { conv, relu } => {
                    let (mut y, cache) = conv.forward(&h);
                    let out = if *relu {
                        relu_inplace(&mut y);
                        Some(y.clone())
                    } else {
                        None
                    };
                    caches.push(LayerCache::Conv { cache, out });
                    h = y;
                }
                Layer::MaxPool(p) => {
                    let (y, argmax) = p.forward(&h);
                    caches.push(LayerCache::MaxPool { argmax, in_shape: h.dim() });
                    h = y;
                }
                Layer::Residual(b) => {
                    let (y, cache) = b.forward(&h);
                    caches.push(LayerCache::Residual(cache));
                    h = y;
                }
            }
        }
        Ok((FeatureMap(h), BackboneCache { layers: caches }))
    }

    /// Forward pass that keeps no activations.
    pub fn infer(&self, x: &Array3<f64>) -> Result<FeatureMap> {
        self.check_input(x)?;
        let mut h = x.as_standard_layout().into_owned();
        for l in &self.layers {
            h = match l {
                Layer::Conv { conv, relu } => {
                    let (mut y, _) = conv.forward(&h);
                    if *relu {
                        relu_inplace(&mut y);
                    }
                    y
                }
                Layer::MaxPool(p) => p.forward(&h).0,
                Layer::Residual(b) => b.forward(&h).0,
            };
        }
        Ok(FeatureMap(h))
    }

    /// Accumulates parameter gradients for `∂L/∂map = d_map` into `grad`.
    pub fn backward(&self, cache: &BackboneCache, d_map: Array3<f64>, grad: &mut Backbone) {
        let mut d = d_map;
        let n = self.layers.len();
        for (i, (layer, lc)) in self.layers.iter().zip(&cache.layers).enumerate().rev() {
            let need_input = i > 0;
            let g = &mut grad.layers[i];
            let next = match (layer, lc, g) {
                (Layer::Conv { conv, .. }, LayerCache::Conv { cache, out }, Layer::Conv { conv: gc, .. }) => {
                    if let Some(out) = out {
                        relu_backward(out, &mut d);
                    }
                    conv.backward(cache, &d, gc, need_input)
                }
                (Layer::MaxPool(p), LayerCache::MaxPool { argmax, in_shape }, _) => {
                    Some(p.backward(argmax, &d, *in_shape))
                }
                (Layer::Residual(b), LayerCache::Residual(c), Layer::Residual(gb)) => b.backward(c, &d, gb, need_input),
                _ => unreachable!("cache of {n} layers does not match the backbone"),
            };
            match next {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

impl Parameters for Backbone {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv { conv, .. } => conv.params(&format!("{prefix}.{i}"), out),
                Layer::Residual(b) => b.params(&format!("{prefix}.{i}"), out),
                Layer::MaxPool(_) => {}
            }
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            match l {
                Layer::Conv { conv, .. } => conv.params_mut(&format!("{prefix}.{i}"), out),
                Layer::Residual(b) => b.params_mut(&format!("{prefix}.{i}"), out),
                Layer::MaxPool(_) => {}
            }
        }
    }
}

/// Channel-first input tensor with pixels mapped from `[0, 1]` to `[-1, 1]`.
pub fn image_tensor(image: &Image) -> Array3<f64> {
    image.to_chw().mapv_into(|v| 2.0 * v - 1.0)
}

/// Runs the backbone on an item image.
pub fn extract_feature_map(image: &Image, backbone: &Backbone) -> Result<FeatureMap> {
    if image.size() != backbone.image_size {
        return Err(AfrecError::shape(
            format!("{0}x{0} image", backbone.image_size),
            format!("{0}x{0} image", image.size()),
        ));
    }
    backbone.infer(&image_tensor(image))
}

/// Gradient of the pooled embedding spread uniformly back over the grid.
pub(crate) fn pool_backward(d_embedding: ArrayView1<f64>, grid: usize) -> Array3<f64> {
    let scale = 1.0 / (grid * grid) as f64;
    let d = d_embedding.len();
    Array3::from_shape_fn((d, grid, grid), |(c, _, _)| d_embedding[c] * scale)
}

/// `|C| × D` affine classifier over global embeddings.
pub type CategoryHead = Linear;

/// Pre-softmax category scores `W v + b`.
pub fn category_logits(embedding: &GlobalEmbedding, head: &CategoryHead) -> Result<Array1<f64>> {
    if head.weight.ncols() != embedding.0.len() || head.bias.len() != head.weight.nrows() {
        return Err(AfrecError::shape(
            format!("embedding of length {}", head.weight.ncols()),
            format!("length {}", embedding.0.len()),
        ));
    }
    Ok(head.forward(embedding.0.view()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

/// Cross-entropy over a batch of `(logits, true category)`, summed (or
/// averaged) over items.
pub fn category_loss(batch: &[(Array1<f64>, usize)], reduction: Reduction) -> Result<f64> {
    if batch.is_empty() {
        return Err(AfrecError::EmptyBatch);
    }
    let total: f64 = batch.iter().map(|(logits, y)| cross_entropy(logits.view(), *y).0).sum();
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / batch.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn desk_backbone_produces_seven_by_seven_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = Backbone::init(&BackboneSpec::desk(64), 64, &mut rng);
        assert_eq!(b.output_grid(), 7);
        assert_eq!(b.output_dim(), 64);
        let x = Array3::from_elem((3, 64, 64), 0.5);
        let (map, _) = b.forward(&x).unwrap();
        assert_eq!(map.0.dim(), (64, 7, 7));
    }

    #[test]
    fn micro_backbone_grid_is_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = Backbone::init(&BackboneSpec::micro(4), 8, &mut rng);
        assert_eq!((b.output_dim(), b.output_grid()), (4, 2));
    }

    #[test]
    fn wrong_image_size_is_a_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = Backbone::init(&BackboneSpec::desk(8), 64, &mut rng);
        let img = Image::from_raw(32, vec![0; 32 * 32 * 3]).unwrap();
        assert!(matches!(extract_feature_map(&img, &b), Err(AfrecError::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_parameters_map_zero_image_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Backbone::init(&BackboneSpec::desk(16), 64, &mut rng).zeros_like();
        let map = b.infer(&Array3::zeros((3, 64, 64))).unwrap();
        assert!(map.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooling_examples() {
        let c = FeatureMap(Array3::from_elem((3, 7, 7), 2.5));
        assert_eq!(global_average_pool(&c).0, array![2.5, 2.5, 2.5]);
        let map = FeatureMap(array![[[1.0, 2.0], [3.0, 4.0]], [[10.0, 20.0], [30.0, 40.0]]]);
        assert_eq!(global_average_pool(&map).0, array![2.5, 25.0]);
        let big = FeatureMap(Array3::zeros((512, 7, 7)));
        assert_eq!(global_average_pool(&big).0.len(), 512);
    }

    #[test]
    fn category_logit_examples() {
        let v = GlobalEmbedding(array![0.5, -1.0, 2.0]);
        let head = Linear { weight: Array2::zeros((2, 3)), bias: array![0.25, -0.75] };
        assert_eq!(category_logits(&v, &head).unwrap(), array![0.25, -0.75]);
        let eye = Linear { weight: Array2::eye(3), bias: Array1::zeros(3) };
        assert_eq!(category_logits(&v, &eye).unwrap(), v.0);
        let bad = Linear { weight: Array2::zeros((2, 4)), bias: Array1::zeros(2) };
        assert!(matches!(category_logits(&v, &bad), Err(AfrecError::ShapeMismatch { .. })));
    }

    #[test]
    fn category_loss_examples() {
        let uniform = vec![(Array1::zeros(4), 1usize)];
        assert!((category_loss(&uniform, Reduction::Sum).unwrap() - 4f64.ln()).abs() < 1e-12);
        let sure = vec![(array![f64::INFINITY, 0.0], 0usize)];
        assert_eq!(category_loss(&sure, Reduction::Sum).unwrap(), 0.0);
        assert!(matches!(category_loss(&[], Reduction::Sum), Err(AfrecError::EmptyBatch)));
        let two = vec![(Array1::zeros(4), 1usize), (Array1::zeros(4), 2)];
        let mean = category_loss(&two, Reduction::Mean).unwrap();
        assert!((mean - 4f64.ln()).abs() < 1e-12);
    }
}
