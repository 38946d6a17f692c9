//! The complete model: backbone, category head, attribute extractor,
//! attention and projections, with the pair forward and backward passes.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{normalise, AttentionParams};
use crate::attributes::{AttributeBlockParams, AttributeMatrix};
use crate::backbone::{
    category_logits, global_average_pool, pool_backward, Backbone, BackboneCache, BackboneSpec, CategoryHead,
    GlobalEmbedding,
};
use crate::compat::{affinity_matrix, uniform_attention, AblationVariant, CategoryPairProjections, CompatibilityBundle};
use crate::data::{AttributeSchema, CategorySet, Image};
use crate::error::{AfrecError, Result};
use crate::nn::{Linear, ParamView, ParamViewMut, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 64×64 images, `D = 64`, four strided conv blocks.
    #[default]
    Desk,
    /// 224×224 images, `D = 512`, 18-layer residual backbone.
    Paper,
}

impl FromStr for Profile {
    type Err = AfrecError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(AfrecError::ConfigInvalid(format!("unknown profile `{s}`"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub dim: usize,
    pub backbone: BackboneSpec,
    pub sae_bias: bool,
    /// Separate attention parameters for the bottom direction.
    pub untied_attention: bool,
}

impl ModelConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self {
                image_size: 64,
                dim: 64,
                backbone: BackboneSpec::desk(64),
                sae_bias: true,
                untied_attention: false,
            },
            Profile::Paper => Self {
                image_size: 224,
                dim: 512,
                backbone: BackboneSpec::resnet18(512),
                sae_bias: true,
                untied_attention: false,
            },
        }
    }

    /// `D = 4`, 8×8 images, 2×2 grid.
    pub fn micro() -> Self {
        Self {
            image_size: 8,
            dim: 4,
            backbone: BackboneSpec::micro(4),
            sae_bias: true,
            untied_attention: false,
        }
    }
}

/// Global embedding and attribute matrix of one item.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemRepr {
    pub global: GlobalEmbedding,
    pub attrs: AttributeMatrix,
}

/// Gradient of a loss with respect to one item's representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemGrad {
    pub dv: Array1<f64>,
    pub da: Array2<f64>,
}

impl ItemGrad {
    pub fn zeros(k: usize, d: usize) -> Self {
        Self { dv: Array1::zeros(d), da: Array2::zeros((k, d)) }
    }
}

/// Forward state of one item kept for the backward pass.
pub struct ItemForward {
    pub repr: ItemRepr,
    pub grid: usize,
    cache: BackboneCache,
}

/// Forward state of one scored pair.
pub struct PairForward {
    pub bundle: CompatibilityBundle,
    cats: (usize, usize),
    variant: AblationVariant,
    a_t: Array2<f64>,
    a_b: Array2<f64>,
    x: Array2<f64>,
    y: Array2<f64>,
    u_t: Array1<f64>,
    u_b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub schema: AttributeSchema,
    pub categories: CategorySet,
    pub backbone: Backbone,
    pub category_head: CategoryHead,
    pub sae: AttributeBlockParams,
    pub attn: AttentionParams,
    pub attn_bottom: Option<AttentionParams>,
    pub proj: CategoryPairProjections,
}

impl Model {
    pub fn init(
        config: ModelConfig,
        schema: AttributeSchema,
        categories: CategorySet,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let backbone = Backbone::init(&config.backbone, config.image_size, rng);
        if backbone.output_dim() != config.dim {
            return Err(AfrecError::ConfigInvalid(format!(
                "backbone produces {} channels but D = {}",
                backbone.output_dim(),
                config.dim
            )));
        }
        if backbone.output_grid() == 0 {
            return Err(AfrecError::ConfigInvalid(format!("image size {} is too small", config.image_size)));
        }
        let d = config.dim;
        let category_head = Linear::init(categories.len(), d, rng);
        let sae = AttributeBlockParams::init(d, &schema.value_counts(), config.sae_bias, rng);
        let attn = AttentionParams::init(d, rng);
        let attn_bottom = config.untied_attention.then(|| AttentionParams::init(d, rng));
        let names = (0..categories.len()).map(|i| categories.name(i).to_string()).collect();
        let proj = CategoryPairProjections::init(d, names, rng);
        Ok(Self { config, schema, categories, backbone, category_head, sae, attn, attn_bottom, proj })
    }

    /// Same structure, every parameter zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            schema: self.schema.clone(),
            categories: self.categories.clone(),
            backbone: self.backbone.zeros_like(),
            category_head: self.category_head.zeros_like(),
            sae: self.sae.zeros_like(),
            attn: self.attn.zeros_like(),
            attn_bottom: self.attn_bottom.as_ref().map(AttentionParams::zeros_like),
            proj: self.proj.zeros_like(),
        }
    }

    pub fn k(&self) -> usize {
        self.schema.len()
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn grid(&self) -> usize {
        self.backbone.output_grid()
    }

    /// Named parameter tensors in a fixed order.
    pub fn named_params(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        self.params("", &mut out);
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = Vec::new();
        self.params_mut("", &mut out);
        out
    }

    fn attn_for_bottom(&self) -> &AttentionParams {
        self.attn_bottom.as_ref().unwrap_or(&self.attn)
    }

    fn repr_from_global(&self, global: GlobalEmbedding) -> Result<ItemRepr> {
        let attrs = self.sae.attributes_from_global(&global)?;
        Ok(ItemRepr { global, attrs })
    }

    /// Inference-only item representation.
    pub fn embed(&self, image: &Image) -> Result<ItemRepr> {
        let map = crate::backbone::extract_feature_map(image, &self.backbone)?;
        self.repr_from_global(global_average_pool(&map))
    }

    pub fn embed_chw(&self, x: &Array3<f64>) -> Result<ItemRepr> {
        let map = self.backbone.infer(x)?;
        self.repr_from_global(global_average_pool(&map))
    }

    /// Item forward pass that keeps the backbone activations.
    pub fn item_forward(&self, x: &Array3<f64>) -> Result<ItemForward> {
        let (map, cache) = self.backbone.forward(x)?;
        let grid = map.grid();
        let repr = self.repr_from_global(global_average_pool(&map))?;
        Ok(ItemForward { repr, grid, cache })
    }

    pub fn category_logits(&self, repr: &ItemRepr) -> Result<Array1<f64>> {
        category_logits(&repr.global, &self.category_head)
    }

    /// Propagates `g` through the attribute blocks (and optionally the
    /// backbone) into `grad`. `g.dv` must already include any direct
    /// contributions to the global embedding.
    pub fn item_backward(&self, fwd: &ItemForward, g: &ItemGrad, grad: &mut Model, into_backbone: bool) {
        let dv = &g.dv + &self.sae.backward_blocks(fwd.repr.global.0.view(), g.da.view(), &mut grad.sae);
        if into_backbone {
            let d_map = pool_backward(dv.view(), fwd.grid);
            self.backbone.backward(&fwd.cache, d_map, &mut grad.backbone);
        }
    }

    /// Backbone-only backward given the full `∂L/∂v` (attribute blocks
    /// already applied), accumulated into `grad`.
    pub fn backbone_backward(&self, fwd: &ItemForward, dv: &Array1<f64>, grad: &mut Backbone) {
        self.backbone.backward(&fwd.cache, pool_backward(dv.view(), fwd.grid), grad);
    }

    /// Scores one pair from item representations.
    pub fn pair_forward(
        &self,
        top: &ItemRepr,
        bottom: &ItemRepr,
        cats: (usize, usize),
        variant: AblationVariant,
    ) -> Result<(CompatibilityBundle, PairForward)> {
        let d = self.dim();
        if top.attrs.0.dim() != (self.k(), d) || bottom.attrs.0.dim() != (self.k(), d) {
            return Err(AfrecError::shape(
                format!("{}x{d} attributes", self.k()),
                format!("{:?} and {:?}", top.attrs.0.dim(), bottom.attrs.0.dim()),
            ));
        }
        let (a_t, a_b) = if variant == AblationVariant::AttrAvg {
            let mean = |a: &AttributeMatrix| a.0.mean_axis(Axis(0)).expect("K ≥ 1").insert_axis(Axis(0));
            (mean(&top.attrs), mean(&bottom.attrs))
        } else {
            (top.attrs.0.clone(), bottom.attrs.0.clone())
        };
        let (u_t, u_b) = if variant == AblationVariant::SelfAttention {
            (top.global.0.clone(), bottom.global.0.clone())
        } else {
            (bottom.global.0.clone(), top.global.0.clone())
        };
        let k_eff = a_t.nrows();
        let (alpha_top, alpha_bottom) = if variant.uses_attention() {
            let st = crate::attention::attention_scores(&top.attrs, &GlobalEmbedding(u_t.clone()), &self.attn)?;
            let sb =
                crate::attention::attention_scores(&bottom.attrs, &GlobalEmbedding(u_b.clone()), self.attn_for_bottom())?;
            (normalise(st.view()), normalise(sb.view()))
        } else {
            (uniform_attention(k_eff), uniform_attention(k_eff))
        };
        let p = if variant.uses_projection() { self.proj.get(cats) } else { None };
        let (x, y) = match p {
            Some(p) => (a_t.dot(p), a_b.dot(p)),
            None => (a_t.clone(), a_b.clone()),
        };
        let m_compat = x.dot(&self.proj.compat).dot(&y.t());
        let m_affinity = if variant.uses_attention() {
            affinity_matrix(&alpha_top, &alpha_bottom)
        } else {
            Array2::ones((k_eff, k_eff))
        };
        let m_weighted = &m_compat * &m_affinity;
        let score = m_weighted.sum();
        let bundle = CompatibilityBundle { m_compat, m_affinity, m_weighted, score, alpha_top, alpha_bottom };
        let fwd = PairForward { bundle: bundle.clone(), cats, variant, a_t, a_b, x, y, u_t, u_b };
        Ok((bundle, fwd))
    }

    /// Backward of `g · score` for one pair. Parameter gradients go to `grad`;
    /// representation gradients to `d_top` and `d_bottom`.
    pub fn pair_backward(
        &self,
        top: &ItemRepr,
        bottom: &ItemRepr,
        fwd: &PairForward,
        g: f64,
        grad: &mut Model,
        d_top: &mut ItemGrad,
        d_bottom: &mut ItemGrad,
    ) {
        let b = &fwd.bundle;
        let c = &self.proj.compat;
        let dm = &b.m_affinity * g;
        let dx = dm.dot(&fwd.y).dot(&c.t());
        let dy = dm.t().dot(&fwd.x).dot(c);
        grad.proj.compat += &fwd.x.t().dot(&dm).dot(&fwd.y);

        let p = if fwd.variant.uses_projection() { self.proj.get(fwd.cats) } else { None };
        let (da_t, da_b) = match p {
            Some(p) => {
                if let Some(gp) = grad.proj.pairs.get_mut(&fwd.cats) {
                    *gp += &fwd.a_t.t().dot(&dx);
                    *gp += &fwd.a_b.t().dot(&dy);
                }
                (dx.dot(&p.t()), dy.dot(&p.t()))
            }
            None => (dx, dy),
        };

        if fwd.variant == AblationVariant::AttrAvg {
            let k = self.k() as f64;
            for mut row in d_top.da.rows_mut() {
                row.scaled_add(1.0 / k, &da_t.row(0));
            }
            for mut row in d_bottom.da.rows_mut() {
                row.scaled_add(1.0 / k, &da_b.row(0));
            }
        } else {
            d_top.da += &da_t;
            d_bottom.da += &da_b;
        }

        if fwd.variant.uses_attention() {
            let d_alpha_t = b.m_compat.dot(&b.alpha_bottom.0) * g;
            let d_alpha_b = b.m_compat.t().dot(&b.alpha_top.0) * g;
            let (da, du_t) = self.attn.backward(&top.attrs, fwd.u_t.view(), &b.alpha_top, d_alpha_t.view(), &mut grad.attn);
            d_top.da += &da;
            let (da, du_b) = match (&self.attn_bottom, &mut grad.attn_bottom) {
                (Some(p), Some(gp)) => p.backward(&bottom.attrs, fwd.u_b.view(), &b.alpha_bottom, d_alpha_b.view(), gp),
                _ => self.attn.backward(&bottom.attrs, fwd.u_b.view(), &b.alpha_bottom, d_alpha_b.view(), &mut grad.attn),
            };
            d_bottom.da += &da;
            if fwd.variant == AblationVariant::SelfAttention {
                d_top.dv += &du_t;
                d_bottom.dv += &du_b;
            } else {
                d_bottom.dv += &du_t;
                d_top.dv += &du_b;
            }
        }
    }
}

impl Parameters for Model {
    fn params<'a>(&'a self, _prefix: &str, out: &mut Vec<ParamView<'a>>) {
        self.backbone.params("backbone", out);
        self.category_head.params("category_head", out);
        self.sae.params("sae", out);
        self.attn.params("attn", out);
        if let Some(a) = &self.attn_bottom {
            a.params("attn_bottom", out);
        }
        self.proj.params("proj", out);
    }

    fn params_mut<'a>(&'a mut self, _prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        self.backbone.params_mut("backbone", out);
        self.category_head.params_mut("category_head", out);
        self.sae.params_mut("sae", out);
        self.attn.params_mut("attn", out);
        if let Some(a) = &mut self.attn_bottom {
            a.params_mut("attn_bottom", out);
        }
        self.proj.params_mut("proj", out);
    }
}
