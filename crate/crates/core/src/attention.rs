//! Reciprocal attention: each item weighs its own attributes by their
//! relevance to the partner item's global embedding.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::attributes::AttributeMatrix;
use crate::backbone::GlobalEmbedding;
use crate::error::{AfrecError, Result};
use crate::nn::{add_outer, push, push_mut, softmax, uniform, ParamView, ParamViewMut, Parameters};

/// Distribution over attributes: non-negative, sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionVector(pub Array1<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w: Array1<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

impl AttentionParams {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / dim as f64).sqrt();
        Self {
            w: uniform(dim, bound, rng),
            w1: uniform((dim, dim), bound, rng),
            w2: uniform((dim, dim), bound, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: Array1::zeros(self.w.len()),
            w1: Array2::zeros(self.w1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
        }
    }

    fn dim(&self) -> usize {
        self.w.len()
    }

    /// `tanh(W1 a_k + W2 u)` for every row `k`, as a `K × D` matrix.
    fn hidden(&self, attr: &AttributeMatrix, u: ArrayView1<f64>) -> Array2<f64> {
        let context = self.w2.dot(&u);
        let mut h = attr.0.dot(&self.w1.t());
        for mut row in h.rows_mut() {
            row += &context;
            row.mapv_inplace(f64::tanh);
        }
        h
    }

    /// Given `∂L/∂α`, accumulates parameter gradients and returns
    /// `(∂L/∂A, ∂L/∂u)`.
    pub fn backward(
        &self,
        attr: &AttributeMatrix,
        u: ArrayView1<f64>,
        alpha: &AttentionVector,
        d_alpha: ArrayView1<f64>,
        grad: &mut AttentionParams,
    ) -> (Array2<f64>, Array1<f64>) {
        let t = self.hidden(attr, u);
        let a = &alpha.0;
        let dot = a.dot(&d_alpha);
        let ds = a * &(&d_alpha - dot);
        let d = self.dim();
        let mut dh = Array2::zeros((attr.k(), d));
        for (k, mut row) in dh.rows_mut().into_iter().enumerate() {
            let tk = t.row(k);
            grad.w.scaled_add(ds[k], &tk);
            row.assign(&(&self.w * ds[k] * &tk.mapv(|x| 1.0 - x * x)));
        }
        let d_attr = dh.dot(&self.w1);
        grad.w1 += &dh.t().dot(&attr.0);
        let dh_sum = dh.sum_axis(ndarray::Axis(0));
        add_outer(&mut grad.w2, dh_sum.view(), u);
        let du = self.w2.t().dot(&dh_sum);
        (d_attr, du)
    }
}

impl Parameters for AttentionParams {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        push(out, format!("{prefix}.w"), &self.w);
        push(out, format!("{prefix}.W1"), &self.w1);
        push(out, format!("{prefix}.W2"), &self.w2);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        push_mut(out, format!("{prefix}.w"), &mut self.w);
        push_mut(out, format!("{prefix}.W1"), &mut self.w1);
        push_mut(out, format!("{prefix}.W2"), &mut self.w2);
    }
}

/// `s_k = wᵀ tanh(W1 a_k + W2 v_partner)`.
pub fn attention_scores(
    attr: &AttributeMatrix,
    partner_global: &GlobalEmbedding,
    params: &AttentionParams,
) -> Result<Array1<f64>> {
    let d = params.dim();
    if attr.0.ncols() != d || partner_global.0.len() != d || params.w1.dim() != (d, d) || params.w2.dim() != (d, d) {
        return Err(AfrecError::shape(
            format!("D = {d}"),
            format!("attributes {:?}, partner {}", attr.0.dim(), partner_global.0.len()),
        ));
    }
    Ok(params.hidden(attr, partner_global.0.view()).dot(&params.w))
}

pub fn normalise(scores: ArrayView1<f64>) -> AttentionVector {
    AttentionVector(softmax(scores))
}

/// Attention of the top conditioned on the bottom and vice versa.
pub fn reciprocal_attention(
    top: (&AttributeMatrix, &GlobalEmbedding),
    bottom: (&AttributeMatrix, &GlobalEmbedding),
    params: &AttentionParams,
) -> Result<(AttentionVector, AttentionVector)> {
    let st = attention_scores(top.0, bottom.1, params)?;
    let sb = attention_scores(bottom.0, top.1, params)?;
    Ok((normalise(st.view()), normalise(sb.view())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_attr(k: usize, d: usize, rng: &mut ChaCha8Rng) -> AttributeMatrix {
        AttributeMatrix(uniform((k, d), 1.0, rng))
    }

    #[test]
    fn zero_projections_give_zero_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = AttentionParams::init(3, &mut rng);
        p.w1.fill(0.0);
        p.w2.fill(0.0);
        let s = attention_scores(&random_attr(4, 3, &mut rng), &GlobalEmbedding(uniform(3, 1.0, &mut rng)), &p).unwrap();
        assert_eq!(s, Array1::<f64>::zeros(4));
    }

    #[test]
    fn hand_values_match_scalar_oracle() {
        let p = AttentionParams {
            w: array![0.5, -1.0],
            w1: array![[1.0, 0.5], [-0.3, 2.0]],
            w2: array![[0.2, 0.0], [0.1, -0.4]],
        };
        let a = AttributeMatrix(array![[0.3, -0.7], [1.2, 0.4]]);
        let u = GlobalEmbedding(array![0.9, -0.2]);
        let s = attention_scores(&a, &u, &p).unwrap();
        for k in 0..2 {
            let mut acc = 0.0;
            for i in 0..2 {
                let mut z = 0.0;
                for j in 0..2 {
                    z += p.w1[[i, j]] * a.0[[k, j]] + p.w2[[i, j]] * u.0[j];
                }
                acc += p.w[i] * z.tanh();
            }
            assert!((s[k] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn normalise_examples() {
        let v = normalise(array![1f64.ln(), 3f64.ln()].view());
        assert!((v.0[0] - 0.25).abs() < 1e-12 && (v.0[1] - 0.75).abs() < 1e-12);
        assert_eq!(normalise(array![2.0, 2.0, 2.0, 2.0].view()).0, Array1::from_elem(4, 0.25));
        let base = array![0.3, -1.2, 4.0];
        let shifted = normalise((&base + 1e3).view());
        let plain = normalise(base.view());
        assert!(plain.0.iter().zip(shifted.0.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn reciprocal_symmetry_and_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = AttentionParams::init(4, &mut rng);
        let a = random_attr(3, 4, &mut rng);
        let va = GlobalEmbedding(uniform(4, 1.0, &mut rng));
        let b = random_attr(3, 4, &mut rng);
        let vb = GlobalEmbedding(uniform(4, 1.0, &mut rng));
        let (x, y) = reciprocal_attention((&a, &va), (&a, &va), &p).unwrap();
        assert_eq!(x, y);
        let (t, bt) = reciprocal_attention((&a, &va), (&b, &vb), &p).unwrap();
        let (bt2, t2) = reciprocal_attention((&b, &vb), (&a, &va), &p).unwrap();
        assert_eq!((t, bt), (t2, bt2));
    }

    #[test]
    fn composed_oracle_k3() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = AttentionParams::init(4, &mut rng);
        let a = random_attr(3, 4, &mut rng);
        let va = GlobalEmbedding(uniform(4, 1.0, &mut rng));
        let b = random_attr(3, 4, &mut rng);
        let vb = GlobalEmbedding(uniform(4, 1.0, &mut rng));
        let (t, _) = reciprocal_attention((&a, &va), (&b, &vb), &p).unwrap();
        let scores: Vec<f64> = (0..3)
            .map(|k| {
                let z = p.w1.dot(&a.row(k)) + p.w2.dot(&vb.0);
                p.w.dot(&z.mapv(f64::tanh))
            })
            .collect();
        let total: f64 = scores.iter().map(|s| s.exp()).sum();
        for k in 0..3 {
            assert!((t.0[k] - scores[k].exp() / total).abs() < 1e-12);
        }
    }

    #[test]
    fn partner_embedding_changes_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = AttentionParams::init(4, &mut rng);
        let a = random_attr(3, 4, &mut rng);
        let u = GlobalEmbedding(uniform(4, 1.0, &mut rng));
        let mut u2 = u.clone();
        u2.0[0] += 0.1;
        let x = normalise(attention_scores(&a, &u, &p).unwrap().view());
        let y = normalise(attention_scores(&a, &u2, &p).unwrap().view());
        let diff = x.0.iter().zip(y.0.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-8);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = AttentionParams::init(4, &mut rng);
        let a = random_attr(3, 5, &mut rng);
        let u = GlobalEmbedding(uniform(4, 1.0, &mut rng));
        assert!(matches!(attention_scores(&a, &u, &p), Err(AfrecError::ShapeMismatch { .. })));
    }
}
