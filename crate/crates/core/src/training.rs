//! Joint objective (pairwise ranking plus category and attribute supervision),
//! adaptive-moment optimiser, attribute pretraining and the training loop.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{image_tensor, Backbone, Reduction};
use crate::checkpoint::{Checkpoint, RngState};
use crate::compat::AblationVariant;
use crate::data::{Corpus, NegativeSide, Split, Triple, TripleSampler};
use crate::error::{AfrecError, Result};
use crate::eval::{available_negatives, build_cases, score_cases, MetricsReport};
use crate::model::{ItemForward, ItemGrad, Model, ModelConfig, Profile};
use crate::nn::{cross_entropy, sigmoid, softplus, Parameters};

/// Parameter name prefixes held fixed by `freeze_sae` after pretraining.
pub const SAE_PREFIXES: [&str; 3] = ["backbone.", "category_head.", "sae."];

/// Seed offset for the fixed validation cases.
const VALIDATION_SEED_SALT: u64 = 0x5eed_0f_da7a;

/// Step size of the desk profile. Its backbone starts from random weights,
/// and at 1e-4 the attribute heads stay far from separable within 20
/// pretraining epochs.
pub const DESK_LEARNING_RATE: f64 = 3e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub bpr: f64,
    pub category: f64,
    pub attribute: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { bpr: 1.0, category: 1.0, attribute: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epoch budget of the attribute pretraining phase.
    pub sae_epochs: usize,
    pub seed: u64,
    pub variant: AblationVariant,
    pub loss_weights: LossWeights,
    pub two_phase: bool,
    pub negatives: NegativeSide,
    /// Keep backbone, category head and attribute blocks fixed after
    /// pretraining.
    pub freeze_sae: bool,
    pub category_reduction: Reduction,
    /// Negatives per validation case.
    pub val_negatives: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 1e-4,
            weight_decay: 1e-5,
            epochs: 30,
            sae_epochs: 20,
            seed: 0,
            variant: AblationVariant::Full,
            loss_weights: LossWeights::default(),
            two_phase: true,
            negatives: NegativeSide::BothSides,
            freeze_sae: false,
            category_reduction: Reduction::Sum,
            val_negatives: crate::eval::DEFAULT_NEGATIVES,
        }
    }
}

impl TrainConfig {
    /// Defaults for a profile. The desk profile trains its backbone from
    /// scratch and uses a larger step than the paper profile.
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self { learning_rate: DESK_LEARNING_RATE, ..Self::default() },
            Profile::Paper => Self::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AfrecError::ConfigInvalid(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be finite and non-negative");
        }
        let w = self.loss_weights;
        if [w.bpr, w.category, w.attribute].iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return bad("loss weights must be finite and non-negative");
        }
        if self.val_negatives == 0 {
            return bad("validation needs at least one negative per case");
        }
        Ok(())
    }

    /// Loss weights after applying the variant.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.loss_weights;
        match self.variant {
            AblationVariant::NoAttrLoss => w.attribute = 0.0,
            AblationVariant::NoCateLoss => w.category = 0.0,
            _ => {}
        }
        w
    }
}

/// `Σ softplus(neg − pos)`, i.e. `−Σ ln σ(pos − neg)`.
pub fn bpr_loss(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() {
        return Err(AfrecError::EmptyBatch);
    }
    if pos.len() != neg.len() {
        return Err(AfrecError::shape(format!("{} negative scores", pos.len()), neg.len()));
    }
    Ok(pos.iter().zip(neg).map(|(p, n)| softplus(n - p)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub bpr: f64,
    pub category: f64,
    pub attribute: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.bpr += o.bpr;
        self.category += o.category;
        self.attribute += o.attribute;
    }
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Scope {
    backbone: bool,
}

/// Category and attribute losses of one item; gradients go to the heads in
/// `grad` and to `g`.
fn auxiliary(
    model: &Model,
    corpus: &Corpus,
    item: usize,
    fwd: &ItemForward,
    weights: LossWeights,
    category_scale: f64,
    grad: &mut Model,
    g: &mut ItemGrad,
) -> Result<(f64, f64)> {
    let it = &corpus.items[item];
    let logits = model.category_logits(&fwd.repr)?;
    let (cat, dz) = cross_entropy(logits.view(), it.category);
    if weights.category > 0.0 {
        let dz = dz * (weights.category * category_scale);
        g.dv += &model.category_head.backward(fwd.repr.global.0.view(), dz.view(), &mut grad.category_head);
    }
    let (attr, da) = model.sae.head_loss_backward(&fwd.repr.attrs, &it.attribute_labels, weights.attribute, &mut grad.sae);
    if weights.attribute > 0.0 {
        g.da += &da;
    }
    Ok((cat * category_scale, attr))
}

/// Runs item forwards in parallel (results in input order).
fn forward_items(model: &Model, corpus: &Corpus, items: &[usize]) -> Result<Vec<ItemForward>> {
    items
        .par_iter()
        .map(|&i| model.item_forward(&image_tensor(&corpus.items[i].image)))
        .collect()
}

/// Attribute blocks, then backbone (in parallel, summed in fixed order).
fn backward_items(model: &Model, fwds: &[ItemForward], grads: &[ItemGrad], grad: &mut Model, scope: Scope) {
    let dvs: Vec<_> = fwds
        .iter()
        .zip(grads)
        .map(|(f, g)| &g.dv + &model.sae.backward_blocks(f.repr.global.0.view(), g.da.view(), &mut grad.sae))
        .collect();
    if !scope.backbone {
        return;
    }
    const CHUNKS: usize = 8;
    let chunk = fwds.len().div_ceil(CHUNKS).max(1);
    let partial: Vec<Backbone> = fwds
        .par_chunks(chunk)
        .zip(dvs.par_chunks(chunk))
        .map(|(fs, ds)| {
            let mut acc = model.backbone.zeros_like();
            for (f, dv) in fs.iter().zip(ds) {
                model.backbone_backward(f, dv, &mut acc);
            }
            acc
        })
        .collect();
    for p in &partial {
        add_backbone(&mut grad.backbone, p);
    }
}

fn add_backbone(acc: &mut Backbone, other: &Backbone) {
    let mut a = Vec::new();
    acc.params_mut("", &mut a);
    let mut b = Vec::new();
    other.params("", &mut b);
    for (x, y) in a.into_iter().zip(b) {
        for (u, v) in x.data.iter_mut().zip(y.data) {
            *u += v;
        }
    }
}

fn unique_items(triples: &[Triple]) -> (Vec<usize>, HashMap<usize, usize>) {
    let mut order = Vec::new();
    let mut slot = HashMap::new();
    for t in triples {
        for i in [Some(t.top), Some(t.pos_bottom), Some(t.neg_bottom), t.neg_top].into_iter().flatten() {
            slot.entry(i).or_insert_with(|| {
                order.push(i);
                order.len() - 1
            });
        }
    }
    (order, slot)
}

fn pair_term(
    model: &Model,
    corpus: &Corpus,
    fwds: &[ItemForward],
    slot: &HashMap<usize, usize>,
    pos: (usize, usize),
    neg: (usize, usize),
    variant: AblationVariant,
    weight: f64,
    grad: &mut Model,
    item_grads: &mut [ItemGrad],
) -> Result<f64> {
    let variant_cats = |(t, b): (usize, usize)| (corpus.items[t].category, corpus.items[b].category);
    let run = |p: (usize, usize)| {
        model.pair_forward(&fwds[slot[&p.0]].repr, &fwds[slot[&p.1]].repr, variant_cats(p), variant)
    };
    let (bp, fp) = run(pos)?;
    let (bn, fnn) = run(neg)?;
    let x = bp.score - bn.score;
    let loss = softplus(-x);
    if weight > 0.0 {
        let coef = -sigmoid(-x) * weight;
        for (pair, f, g) in [(pos, &fp, coef), (neg, &fnn, -coef)] {
            let (st, sb) = (slot[&pair.0], slot[&pair.1]);
            let (dt, db) = two_mut(item_grads, st, sb);
            model.pair_backward(&fwds[st].repr, &fwds[sb].repr, f, g, grad, dt, db);
        }
    }
    Ok(loss)
}

/// Distinct mutable slots; a top and a bottom are never the same item.
fn two_mut(v: &mut [ItemGrad], a: usize, b: usize) -> (&mut ItemGrad, &mut ItemGrad) {
    assert_ne!(a, b, "pair of identical items");
    if a < b {
        let (l, r) = v.split_at_mut(b);
        (&mut l[a], &mut r[0])
    } else {
        let (l, r) = v.split_at_mut(a);
        (&mut r[0], &mut l[b])
    }
}

/// Weighted objective on one batch and its gradient for every parameter.
/// Category and attribute terms cover the distinct items of the batch.
pub fn total_loss(
    corpus: &Corpus,
    batch: &[Triple],
    model: &Model,
    config: &TrainConfig,
) -> Result<(LossBreakdown, Model)> {
    total_loss_scoped(corpus, batch, model, config, Scope { backbone: !config.freeze_sae })
}

fn total_loss_scoped(
    corpus: &Corpus,
    batch: &[Triple],
    model: &Model,
    config: &TrainConfig,
    scope: Scope,
) -> Result<(LossBreakdown, Model)> {
    if batch.is_empty() {
        return Err(AfrecError::EmptyBatch);
    }
    let w = config.effective_weights();
    let (items, slot) = unique_items(batch);
    let fwds = forward_items(model, corpus, &items)?;
    let mut grad = model.zeros_like();
    let (k, d) = (model.k(), model.dim());
    let mut item_grads: Vec<ItemGrad> = items.iter().map(|_| ItemGrad::zeros(k, d)).collect();

    let mut bpr = 0.0;
    for t in batch {
        bpr += pair_term(model, corpus, &fwds, &slot, (t.top, t.pos_bottom), (t.top, t.neg_bottom), config.variant, w.bpr, &mut grad, &mut item_grads)?;
        if let Some(nt) = t.neg_top {
            bpr += pair_term(model, corpus, &fwds, &slot, (t.top, t.pos_bottom), (nt, t.pos_bottom), config.variant, w.bpr, &mut grad, &mut item_grads)?;
        }
    }
    let category_scale = match config.category_reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / items.len() as f64,
    };
    let (mut cat, mut attr) = (0.0, 0.0);
    for (j, &i) in items.iter().enumerate() {
        let (c, a) = auxiliary(model, corpus, i, &fwds[j], w, category_scale, &mut grad, &mut item_grads[j])?;
        cat += c;
        attr += a;
    }
    backward_items(model, &fwds, &item_grads, &mut grad, scope);
    let total = w.bpr * bpr + w.category * cat + w.attribute * attr;
    Ok((LossBreakdown { total, bpr, category: cat, attribute: attr }, grad))
}

/// Adam with L2 penalty folded into the gradient (`g + λθ`). Moment state is
/// kept per parameter name, so parameters created mid-run start fresh.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, AdamState>,
}

#[derive(Debug, Clone, PartialEq)]
struct AdamState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self { learning_rate, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: BTreeMap::new() }
    }

    /// Updates every parameter of `model` whose name does not start with one
    /// of `frozen`.
    pub fn step(&mut self, model: &mut Model, grad: &Model, frozen: &[&str]) {
        let grads: HashMap<String, &[f64]> = grad.named_params().into_iter().map(|p| (p.name, p.data)).collect();
        for p in model.named_params_mut() {
            if frozen.iter().any(|f| p.name.starts_with(f)) {
                continue;
            }
            let Some(g) = grads.get(&p.name) else { continue };
            let s = self.state.entry(p.name).or_insert_with(|| AdamState {
                step: 0,
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            s.step += 1;
            let bc1 = 1.0 - self.beta1.powi(s.step as i32);
            let bc2 = 1.0 - self.beta2.powi(s.step as i32);
            for (((theta, &gi), m), v) in p.data.iter_mut().zip(g.iter()).zip(&mut s.m).zip(&mut s.v) {
                let gi = gi + self.weight_decay * *theta;
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                let update = self.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *theta -= update;
            }
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub bpr: f64,
    pub category: f64,
    pub attribute: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

/// Held-out classification accuracy after pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeAccuracy {
    pub attribute: String,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeReport {
    pub category_accuracy: f64,
    pub attributes: Vec<AttributeAccuracy>,
    pub n_items: usize,
    pub best_epoch: usize,
}

impl SaeReport {
    pub fn min_attribute_accuracy(&self) -> f64 {
        self.attributes.iter().map(|a| a.accuracy).fold(f64::INFINITY, f64::min)
    }
}

/// Category and per-attribute accuracy over `items`.
pub fn classification_report(model: &Model, corpus: &Corpus, items: &[usize]) -> Result<SaeReport> {
    let reprs: Vec<_> = items.par_iter().map(|&i| model.embed(&corpus.items[i].image)).collect::<Result<_>>()?;
    let argmax = |v: &ndarray::Array1<f64>| {
        v.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0
    };
    let k = model.k();
    let mut cat_hits = 0;
    let mut hits = vec![0usize; k];
    let mut seen = vec![0usize; k];
    for (&i, r) in items.iter().zip(&reprs) {
        let it = &corpus.items[i];
        if argmax(&model.category_logits(r)?) == it.category {
            cat_hits += 1;
        }
        let logits = crate::attributes::attribute_value_logits(&r.attrs, &model.sae)?;
        for (a, label) in it.attribute_labels.iter().enumerate() {
            if let Some(y) = label {
                seen[a] += 1;
                if argmax(&logits[a]) == *y {
                    hits[a] += 1;
                }
            }
        }
    }
    let ratio = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(SaeReport {
        category_accuracy: ratio(cat_hits, items.len()),
        attributes: model
            .schema
            .attributes
            .iter()
            .enumerate()
            .map(|(a, attr)| AttributeAccuracy { attribute: attr.name.clone(), accuracy: ratio(hits[a], seen[a]), n: seen[a] })
            .collect(),
        n_items: items.len(),
        best_epoch: 0,
    })
}

fn aux_loss_only(model: &Model, corpus: &Corpus, items: &[usize], w: LossWeights) -> Result<f64> {
    let reprs: Vec<_> = items.par_iter().map(|&i| model.embed(&corpus.items[i].image)).collect::<Result<_>>()?;
    let mut total = 0.0;
    for (&i, r) in items.iter().zip(&reprs) {
        let it = &corpus.items[i];
        total += w.category * cross_entropy(model.category_logits(r)?.view(), it.category).0;
        let logits = crate::attributes::attribute_value_logits(&r.attrs, &model.sae)?;
        total += w.attribute * crate::attributes::attribute_loss(&[(logits, it.attribute_labels.clone())])?;
    }
    Ok(total)
}

/// Trains backbone, category head and attribute extractor on the category
/// and attribute losses of train-split items. Keeps the epoch with the
/// lowest validation loss and reports accuracy on test-split items.
pub fn pretrain_sae(
    corpus: &Corpus,
    model: &mut Model,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    log: &mut Vec<EpochMetrics>,
) -> Result<SaeReport> {
    config.validate()?;
    let train = corpus.split_items(Split::Train);
    if train.is_empty() {
        return Err(AfrecError::EmptyCorpus);
    }
    let valid = corpus.split_items(Split::Valid);
    let test = corpus.split_items(Split::Test);
    let mut w = config.effective_weights();
    w.bpr = 0.0;
    let mut opt = Adam::new(config.learning_rate, config.weight_decay);
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 1..=config.sae_epochs {
        let mut order = train.clone();
        order.shuffle(rng);
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(config.batch_size) {
            let fwds = forward_items(model, corpus, batch)?;
            let mut grad = model.zeros_like();
            let (k, d) = (model.k(), model.dim());
            let mut gs: Vec<ItemGrad> = batch.iter().map(|_| ItemGrad::zeros(k, d)).collect();
            let mut part = LossBreakdown::default();
            let scale = match config.category_reduction {
                Reduction::Sum => 1.0,
                Reduction::Mean => 1.0 / batch.len() as f64,
            };
            for (j, &i) in batch.iter().enumerate() {
                let (c, a) = auxiliary(model, corpus, i, &fwds[j], w, scale, &mut grad, &mut gs[j])?;
                part.category += c;
                part.attribute += a;
            }
            part.total = w.category * part.category + w.attribute * part.attribute;
            backward_items(model, &fwds, &gs, &mut grad, Scope { backbone: true });
            opt.step(model, &grad, &[]);
            sum.add(&part);
        }
        let val_loss = if valid.is_empty() { None } else { Some(aux_loss_only(model, corpus, &valid, w)?) };
        log.push(EpochMetrics {
            phase: "sae".into(),
            epoch,
            loss: sum.total,
            bpr: 0.0,
            category: sum.category,
            attribute: sum.attribute,
            val_auc: None,
            val_loss,
        });
        let score = val_loss.unwrap_or(sum.total);
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let best_epoch = match best {
        Some((_, e, m)) => {
            *model = m;
            e
        }
        None => 0,
    };
    let report_items = if test.is_empty() { &train } else { &test };
    let mut report = classification_report(model, corpus, report_items)?;
    report.best_epoch = best_epoch;
    Ok(report)
}

/// Result of [`train`]: best checkpoint plus the full log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochMetrics>,
    pub sae_report: Option<SaeReport>,
    pub best_epoch: usize,
}

/// Validation AUC on fixed cases from the valid split.
fn validation_auc(model: &Model, corpus: &Corpus, cases: &mut [crate::eval::RankedCase], variant: AblationVariant) -> Result<f64> {
    score_cases(model, corpus, cases, variant)?;
    Ok(MetricsReport::from_cases(cases, 0)?.auc)
}

/// Full schedule: optional attribute pretraining, then joint training with
/// the ranking objective. The returned checkpoint holds the parameters of
/// the epoch with the best validation AUC.
pub fn train(corpus: &Corpus, model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model = Model::init(model_config.clone(), corpus.schema.clone(), corpus.categories.clone(), &mut rng)?;
    train_from(corpus, model, config, rng, |_| {})
}

/// [`train`] starting from given parameters and generator state; `on_epoch`
/// sees every log line as it is produced.
pub fn train_from(
    corpus: &Corpus,
    mut model: Model,
    config: &TrainConfig,
    mut rng: ChaCha8Rng,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    crate::eval::check_schema(&model, corpus)?;
    let sampler = TripleSampler::new(corpus)?;
    let mut log = Vec::new();
    let sae_report = if config.two_phase && config.sae_epochs > 0 {
        let r = pretrain_sae(corpus, &mut model, config, &mut rng, &mut log)?;
        for m in &log {
            on_epoch(m);
        }
        Some(r)
    } else {
        None
    };

    // Small corpora get fewer validation negatives rather than an error.
    let mut val_cases = match available_negatives(corpus, Split::Valid) {
        Some(n) if n > 0 => {
            let n = n.min(config.val_negatives);
            Some(build_cases(corpus, Split::Valid, n, config.seed ^ VALIDATION_SEED_SALT)?)
        }
        _ => None,
    };
    let frozen: &[&str] = if config.freeze_sae { &SAE_PREFIXES } else { &[] };
    let scope = Scope { backbone: !config.freeze_sae };
    let mut opt = Adam::new(config.learning_rate, config.weight_decay);
    let mut best: Option<(f64, usize, Model, RngState)> = None;
    for epoch in 1..=config.epochs {
        let triples = sampler.epoch(config.negatives, &mut rng)?;
        let mut sum = LossBreakdown::default();
        for batch in triples.chunks(config.batch_size) {
            if config.variant.uses_projection() {
                for t in batch {
                    let top_cat = corpus.items[t.top].category;
                    let bottom_cat = |b: usize| corpus.items[b].category;
                    model.proj.ensure((top_cat, bottom_cat(t.pos_bottom)), &mut rng);
                    model.proj.ensure((top_cat, bottom_cat(t.neg_bottom)), &mut rng);
                    if let Some(nt) = t.neg_top {
                        model.proj.ensure((corpus.items[nt].category, bottom_cat(t.pos_bottom)), &mut rng);
                    }
                }
            }
            let (loss, grad) = total_loss_scoped(corpus, batch, &model, config, scope)?;
            opt.step(&mut model, &grad, frozen);
            sum.add(&loss);
        }
        let val_auc = match &mut val_cases {
            Some(c) => Some(validation_auc(&model, corpus, c, config.variant)?),
            None => None,
        };
        let m = EpochMetrics {
            phase: "joint".into(),
            epoch,
            loss: sum.total,
            bpr: sum.bpr,
            category: sum.category,
            attribute: sum.attribute,
            val_auc,
            val_loss: None,
        };
        on_epoch(&m);
        log.push(m);
        let score = val_auc.unwrap_or(-sum.total);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, model.clone(), RngState::of(&rng)));
        }
    }
    let (best_epoch, model, rng_state) = match best {
        Some((_, e, m, r)) => (e, m, r),
        None => (0, model, RngState::of(&rng)),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint { model, epoch: best_epoch, rng: rng_state, train_config: Some(config.clone()) },
        log,
        sae_report,
        best_epoch,
    })
}

/// Writes the log as JSON lines.
pub fn write_log(log: &[EpochMetrics], out: &mut impl Write) -> Result<()> {
    for m in log {
        serde_json::to_writer(&mut *out, m)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
