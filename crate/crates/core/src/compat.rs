//! Category-projected bilinear attribute compatibility, attention affinity,
//! and the pair score; also hosts the ablation variants.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionVector;
use crate::attributes::AttributeMatrix;
use crate::data::Item;
use crate::error::{AfrecError, Result};
use crate::model::Model;
use crate::nn::{push, push_mut, uniform, ParamView, ParamViewMut, Parameters};

/// Spread of the noise added to identity when a projection is created.
pub const PROJECTION_NOISE: f64 = 0.01;

/// Model variant; all but `Full` disable one component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    #[default]
    Full,
    /// Attribute loss weight forced to zero.
    NoAttrLoss,
    /// Category loss weight forced to zero.
    NoCateLoss,
    /// Affinity replaced by all ones: the score is the plain sum of the
    /// compatibility matrix.
    NoAttention,
    /// Each item attends conditioned on its own global embedding.
    SelfAttention,
    /// Every category-pair projection fixed to identity.
    NoCateProjection,
    /// Attribute rows averaged to a single row; all matrices become 1×1.
    AttrAvg,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 7] = [
        AblationVariant::Full,
        AblationVariant::NoAttrLoss,
        AblationVariant::NoCateLoss,
        AblationVariant::NoAttention,
        AblationVariant::SelfAttention,
        AblationVariant::NoCateProjection,
        AblationVariant::AttrAvg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoAttrLoss => "no-attr-loss",
            AblationVariant::NoCateLoss => "no-cate-loss",
            AblationVariant::NoAttention => "no-attention",
            AblationVariant::SelfAttention => "self-attention",
            AblationVariant::NoCateProjection => "no-cate-projection",
            AblationVariant::AttrAvg => "attr-avg",
        }
    }

    pub(crate) fn uses_attention(self) -> bool {
        !matches!(self, AblationVariant::NoAttention | AblationVariant::AttrAvg)
    }

    pub(crate) fn uses_projection(self) -> bool {
        self != AblationVariant::NoCateProjection
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationVariant {
    type Err = AfrecError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| AfrecError::ConfigInvalid(format!("unknown variant `{s}`")))
    }
}

/// `W_cc` per ordered (top category, bottom category) pair, created on first
/// use, and the shared `W_compat`.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryPairProjections {
    pub categories: Vec<String>,
    pub pairs: BTreeMap<(usize, usize), Array2<f64>>,
    pub compat: Array2<f64>,
}

fn noisy_identity(dim: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::eye(dim) + uniform((dim, dim), PROJECTION_NOISE, rng)
}

impl CategoryPairProjections {
    pub fn init(dim: usize, categories: Vec<String>, rng: &mut impl Rng) -> Self {
        Self {
            categories,
            pairs: BTreeMap::new(),
            compat: noisy_identity(dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.compat.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            categories: self.categories.clone(),
            pairs: self.pairs.iter().map(|(k, v)| (*k, Array2::zeros(v.raw_dim()))).collect(),
            compat: Array2::zeros(self.compat.raw_dim()),
        }
    }

    pub fn get(&self, cats: (usize, usize)) -> Option<&Array2<f64>> {
        self.pairs.get(&cats)
    }

    /// Creates the projection for `cats` if absent. Returns true if created.
    pub fn ensure(&mut self, cats: (usize, usize), rng: &mut impl Rng) -> bool {
        if self.pairs.contains_key(&cats) {
            return false;
        }
        let p = noisy_identity(self.dim(), rng);
        self.pairs.insert(cats, p);
        true
    }

    pub fn param_name(&self, cats: (usize, usize)) -> String {
        format!("proj.cc.{}__{}", self.categories[cats.0], self.categories[cats.1])
    }

    /// Inverse of [`Self::param_name`] over the known categories.
    pub fn parse_param_name(&self, name: &str) -> Option<(usize, usize)> {
        let n = self.categories.len();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .find(|&c| self.param_name(c) == name)
    }
}

impl Parameters for CategoryPairProjections {
    fn params<'a>(&'a self, _prefix: &str, out: &mut Vec<ParamView<'a>>) {
        for (cats, p) in &self.pairs {
            push(out, self.param_name(*cats), p);
        }
        push(out, "proj.compat".into(), &self.compat);
    }

    fn params_mut<'a>(&'a mut self, _prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        let names: Vec<String> = self.pairs.keys().map(|c| self.param_name(*c)).collect();
        for (name, p) in names.into_iter().zip(self.pairs.values_mut()) {
            push_mut(out, name, p);
        }
        push_mut(out, "proj.compat".into(), &mut self.compat);
    }
}

/// Everything one pair contributes to scoring and explanation.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityBundle {
    pub m_compat: Array2<f64>,
    pub m_affinity: Array2<f64>,
    pub m_weighted: Array2<f64>,
    pub score: f64,
    pub alpha_top: AttentionVector,
    pub alpha_bottom: AttentionVector,
}

/// `(A_top P)  W_compat  (A_bottom P)ᵀ` with `P = W_cc` of the category pair,
/// identity if the pair has no projection yet.
pub fn compat_matrix(
    top: &AttributeMatrix,
    bottom: &AttributeMatrix,
    cats: (usize, usize),
    proj: &CategoryPairProjections,
) -> Result<Array2<f64>> {
    let d = proj.dim();
    if top.0.ncols() != d || bottom.0.ncols() != d {
        return Err(AfrecError::shape(
            format!("D = {d}"),
            format!("top {:?}, bottom {:?}", top.0.dim(), bottom.0.dim()),
        ));
    }
    let (x, y) = match proj.get(cats) {
        Some(p) => (top.0.dot(p), bottom.0.dot(p)),
        None => (top.0.clone(), bottom.0.clone()),
    };
    Ok(x.dot(&proj.compat).dot(&y.t()))
}

/// Outer product `α_top α_bottomᵀ`.
pub fn affinity_matrix(alpha_top: &AttentionVector, alpha_bottom: &AttentionVector) -> Array2<f64> {
    let a = alpha_top.0.view().insert_axis(ndarray::Axis(1));
    let b = alpha_bottom.0.view().insert_axis(ndarray::Axis(0));
    a.dot(&b)
}

pub fn weighted_compat(m_compat: &Array2<f64>, m_affinity: &Array2<f64>) -> Result<Array2<f64>> {
    if m_compat.dim() != m_affinity.dim() {
        return Err(AfrecError::shape(format!("{:?}", m_compat.dim()), format!("{:?}", m_affinity.dim())));
    }
    Ok(m_compat * m_affinity)
}

/// Sum of all entries of the weighted matrix.
pub fn score(m_weighted: &Array2<f64>) -> f64 {
    m_weighted.sum()
}

/// Runs the full pipeline on two items under `variant`.
pub fn score_pair(top: &Item, bottom: &Item, model: &Model, variant: AblationVariant) -> Result<CompatibilityBundle> {
    let t = model.embed(&top.image)?;
    let b = model.embed(&bottom.image)?;
    Ok(model.pair_forward(&t, &b, (top.category, bottom.category), variant)?.0)
}

pub(crate) fn uniform_attention(k: usize) -> AttentionVector {
    AttentionVector(Array1::from_elem(k, 1.0 / k as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_proj(d: usize) -> CategoryPairProjections {
        let mut p = CategoryPairProjections::init(d, vec!["a".into(), "b".into()], &mut ChaCha8Rng::seed_from_u64(0));
        p.compat = Array2::eye(d);
        p.pairs.insert((0, 1), Array2::eye(d));
        p
    }

    #[test]
    fn identity_projections_give_gram_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = AttributeMatrix(uniform((3, 4), 1.0, &mut rng));
        let b = AttributeMatrix(uniform((3, 4), 1.0, &mut rng));
        let m = compat_matrix(&t, &b, (0, 1), &identity_proj(4)).unwrap();
        let gram = t.0.dot(&b.0.t());
        assert!(m.iter().zip(gram.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        let zero = AttributeMatrix(Array2::zeros((3, 4)));
        assert!(compat_matrix(&zero, &b, (0, 1), &identity_proj(4)).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn hand_values_match_triple_loop() {
        let mut p = identity_proj(2);
        p.pairs.insert((0, 1), array![[1.0, 0.5], [-0.5, 2.0]]);
        p.compat = array![[0.3, -1.0], [0.7, 0.2]];
        let t = AttributeMatrix(array![[1.0, 2.0], [-1.0, 0.5]]);
        let b = AttributeMatrix(array![[0.2, -0.3], [1.5, 1.0]]);
        let m = compat_matrix(&t, &b, (0, 1), &p).unwrap();
        let w = &p.pairs[&(0, 1)];
        for k in 0..2 {
            for kk in 0..2 {
                let mut acc = 0.0;
                for i in 0..2 {
                    for j in 0..2 {
                        let x: f64 = (0..2).map(|d| t.0[[k, d]] * w[[d, i]]).sum();
                        let y: f64 = (0..2).map(|d| b.0[[kk, d]] * w[[d, j]]).sum();
                        acc += x * p.compat[[i, j]] * y;
                    }
                }
                assert!((m[[k, kk]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn affinity_examples() {
        let u = uniform_attention(4);
        assert!(affinity_matrix(&u, &u).iter().all(|&x| (x - 1.0 / 16.0).abs() < 1e-15));
        let ei = AttentionVector(array![0.0, 1.0, 0.0]);
        let ej = AttentionVector(array![0.0, 0.0, 1.0]);
        let m = affinity_matrix(&ei, &ej);
        assert_eq!(m.sum(), 1.0);
        assert_eq!(m[[1, 2]], 1.0);
        let a = AttentionVector(array![0.2, 0.5, 0.3]);
        let b = AttentionVector(array![0.6, 0.1, 0.3]);
        let m = affinity_matrix(&a, &b);
        for i in 0..2 {
            for j in 0..2 {
                let minor = m[[i, j]] * m[[i + 1, j + 1]] - m[[i, j + 1]] * m[[i + 1, j]];
                assert!(minor.abs() < 1e-15);
            }
        }
    }

    #[test]
    fn weighted_and_score_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mc: Array2<f64> = uniform((3, 3), 1.0, &mut rng);
        assert_eq!(weighted_compat(&mc, &Array2::ones((3, 3))).unwrap(), mc);
        assert!(weighted_compat(&mc, &Array2::zeros((3, 3))).unwrap().iter().all(|&x| x == 0.0));
        assert!(weighted_compat(&mc, &Array2::zeros((2, 3))).is_err());
        let ma: Array2<f64> = uniform((3, 3), 1.0, &mut rng);
        let w = weighted_compat(&mc, &ma).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(w[[i, j]], mc[[i, j]] * ma[[i, j]]);
            }
        }
        assert_eq!(score(&Array2::zeros((3, 3))), 0.0);
        let a = AttentionVector(array![0.2, 0.5, 0.3]);
        let b = AttentionVector(array![0.6, 0.1, 0.3]);
        let s = score(&weighted_compat(&mc, &affinity_matrix(&a, &b)).unwrap());
        assert!((s - a.0.dot(&mc.dot(&b.0))).abs() < 1e-10);
    }

    #[test]
    fn k1_identity_collapse() {
        let t = AttributeMatrix(array![[1.0, 2.0, -1.0]]);
        let b = AttributeMatrix(array![[0.5, 0.5, 2.0]]);
        let mut p = identity_proj(3);
        p.pairs.clear();
        let m = compat_matrix(&t, &b, (0, 0), &p).unwrap();
        let one = AttentionVector(array![1.0]);
        assert_eq!(score(&weighted_compat(&m, &affinity_matrix(&one, &one)).unwrap()), t.0.row(0).dot(&b.0.row(0)));
    }

    #[test]
    fn variants_parse_and_print() {
        for v in AblationVariant::ALL {
            assert_eq!(v.as_str().parse::<AblationVariant>().unwrap(), v);
        }
        assert!("nope".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn projection_names_round_trip() {
        let mut p = CategoryPairProjections::init(2, vec!["tee".into(), "skirt".into()], &mut ChaCha8Rng::seed_from_u64(0));
        assert!(p.ensure((0, 1), &mut ChaCha8Rng::seed_from_u64(1)));
        assert!(!p.ensure((0, 1), &mut ChaCha8Rng::seed_from_u64(1)));
        assert_eq!(p.param_name((0, 1)), "proj.cc.tee__skirt");
        assert_eq!(p.parse_param_name("proj.cc.tee__skirt"), Some((0, 1)));
        assert_eq!(p.parse_param_name("proj.cc.skirt__skirt"), Some((1, 1)));
        assert_eq!(p.parse_param_name("proj.cc.x__y"), None);
    }
}
