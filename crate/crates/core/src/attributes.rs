//! Semantic attribute extractor: K parallel positionwise (1×1) linear blocks
//! over the shared feature map, each pooled to one attribute representation,
//! plus per-attribute value classifiers trained from partial labels.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::backbone::{global_average_pool, FeatureMap, GlobalEmbedding};
use crate::error::{AfrecError, Result};
use crate::nn::{cross_entropy, Linear, ParamView, ParamViewMut, Parameters};

/// `K × D`; row `k` is the representation of attribute `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeMatrix(pub Array2<f64>);

impl AttributeMatrix {
    pub fn k(&self) -> usize {
        self.0.nrows()
    }

    pub fn row(&self, k: usize) -> ArrayView1<'_, f64> {
        self.0.row(k)
    }
}

/// One block (`D × D` kernel plus bias) and one `N_k × D` value classifier per
/// attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeBlockParams {
    pub blocks: Vec<Linear>,
    pub heads: Vec<Linear>,
    /// When false the block biases stay at zero and receive no gradient.
    pub use_bias: bool,
}

impl AttributeBlockParams {
    pub fn init(dim: usize, value_counts: &[usize], use_bias: bool, rng: &mut impl Rng) -> Self {
        let blocks = value_counts.iter().map(|_| Linear::init(dim, dim, rng)).collect();
        let heads = value_counts.iter().map(|&n| Linear::init(n, dim, rng)).collect();
        Self { blocks, heads, use_bias }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(Linear::zeros_like).collect(),
            heads: self.heads.iter().map(Linear::zeros_like).collect(),
            use_bias: self.use_bias,
        }
    }

    pub fn k(&self) -> usize {
        self.blocks.len()
    }

    pub fn dim(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.weight.ncols())
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if self.dim() != d {
            return Err(AfrecError::shape(format!("D = {}", self.dim()), format!("D = {d}")));
        }
        Ok(())
    }

    /// Attribute matrix from an already pooled embedding. Pooling is linear, so
    /// `pool(W_k F + b_k) = W_k pool(F) + b_k`.
    pub fn attributes_from_global(&self, v: &GlobalEmbedding) -> Result<AttributeMatrix> {
        self.check_dim(v.0.len())?;
        let mut a = Array2::zeros((self.k(), self.dim()));
        for (mut row, block) in a.rows_mut().into_iter().zip(&self.blocks) {
            row.assign(&block.forward(v.0.view()));
        }
        Ok(AttributeMatrix(a))
    }

    /// Accumulates block gradients for `∂L/∂A = d_a` and returns `∂L/∂v`.
    pub fn backward_blocks(&self, v: ArrayView1<f64>, d_a: ArrayView2<f64>, grad: &mut Self) -> Array1<f64> {
        let mut dv = Array1::zeros(v.len());
        for (k, (block, g)) in self.blocks.iter().zip(grad.blocks.iter_mut()).enumerate() {
            let dk = d_a.row(k);
            if dk.iter().all(|&x| x == 0.0) {
                continue;
            }
            dv += &block.backward(v, dk, g);
            if !self.use_bias {
                g.bias.fill(0.0);
            }
        }
        dv
    }

    /// Masked attribute cross-entropy of one item. Head gradients of
    /// `scale · loss` are accumulated into `grad`; returns the unscaled loss
    /// and `∂(scale · loss)/∂A`. A zero scale skips the backward pass.
    pub fn head_loss_backward(
        &self,
        a: &AttributeMatrix,
        labels: &[Option<usize>],
        scale: f64,
        grad: &mut Self,
    ) -> (f64, Array2<f64>) {
        let mut d_a = Array2::zeros(a.0.raw_dim());
        let mut loss = 0.0;
        for (k, label) in labels.iter().enumerate() {
            let Some(y) = *label else { continue };
            let head = &self.heads[k];
            let logits = head.forward(a.row(k));
            let (l, dz) = cross_entropy(logits.view(), y);
            loss += l;
            if scale == 0.0 {
                continue;
            }
            let dz = dz * scale;
            let da = head.backward(a.row(k), dz.view(), &mut grad.heads[k]);
            d_a.row_mut(k).assign(&da);
        }
        (loss, d_a)
    }
}

impl Parameters for AttributeBlockParams {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        for (k, b) in self.blocks.iter().enumerate() {
            b.params(&format!("{prefix}.block.{k}"), out);
        }
        for (k, h) in self.heads.iter().enumerate() {
            h.params(&format!("{prefix}.head.{k}"), out);
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.params_mut(&format!("{prefix}.block.{k}"), out);
        }
        for (k, h) in self.heads.iter_mut().enumerate() {
            h.params_mut(&format!("{prefix}.head.{k}"), out);
        }
    }
}

/// Per-attribute representations of one item: each block applied at every
/// grid position, then pooled.
pub fn extract_attributes(map: &FeatureMap, params: &AttributeBlockParams) -> Result<AttributeMatrix> {
    params.check_dim(map.channels())?;
    params.attributes_from_global(&global_average_pool(map))
}

/// [`extract_attributes`] computed literally: positionwise transform of the
/// whole map, then pooling. Slower; used to cross-check the pooled route.
pub fn extract_attributes_positionwise(map: &FeatureMap, params: &AttributeBlockParams) -> Result<AttributeMatrix> {
    params.check_dim(map.channels())?;
    let (d, h, w) = map.0.dim();
    let flat = map.0.view().into_shape_with_order((d, h * w)).expect("contiguous map");
    let mut a = Array2::zeros((params.k(), d));
    for (k, block) in params.blocks.iter().enumerate() {
        let transformed = block.weight.dot(&flat) + &block.bias.view().insert_axis(Axis(1));
        a.slice_mut(s![k, ..]).assign(&transformed.mean_axis(Axis(1)).expect("non-empty grid"));
    }
    Ok(AttributeMatrix(a))
}

/// Pre-softmax value scores `W_attr_k a_k + b_attr_k` for every attribute.
pub fn attribute_value_logits(attr: &AttributeMatrix, params: &AttributeBlockParams) -> Result<Vec<Array1<f64>>> {
    if attr.k() != params.k() {
        return Err(AfrecError::shape(format!("K = {}", params.k()), format!("K = {}", attr.k())));
    }
    params.check_dim(attr.0.ncols())?;
    Ok(params.heads.iter().enumerate().map(|(k, h)| h.forward(attr.row(k))).collect())
}

/// One item's attribute logits and optional true value per attribute.
pub type AttributeExample = (Vec<Array1<f64>>, Vec<Option<usize>>);

/// Cross-entropy summed over items and labelled attributes.
pub fn attribute_loss(batch: &[AttributeExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(AfrecError::EmptyBatch);
    }
    let mut total = 0.0;
    for (logits, labels) in batch {
        if logits.len() != labels.len() {
            return Err(AfrecError::shape(format!("{} labels", logits.len()), format!("{} labels", labels.len())));
        }
        for (z, y) in logits.iter().zip(labels) {
            if let Some(y) = *y {
                if y >= z.len() {
                    return Err(AfrecError::shape(format!("label < {}", z.len()), y.to_string()));
                }
                total += cross_entropy(z.view(), y).0;
            }
        }
    }
    Ok(total)
}
