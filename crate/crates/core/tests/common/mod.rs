//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use afrec::compat::AblationVariant;
use afrec::data::{Attribute, AttributeSchema, CategorySet, Corpus, Image, Item, NegativeSide, OutfitPair, Side, Splits, Triple};
use afrec::model::{Model, ModelConfig};
use afrec::training::{total_loss, LossWeights, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// K = 3 attributes with 2, 3 and 4 values.
pub fn micro_schema() -> AttributeSchema {
    let attr = |name: &str, n: usize| Attribute {
        name: name.into(),
        values: (0..n).map(|v| format!("{name}{v}")).collect(),
    };
    AttributeSchema::new(vec![attr("a", 2), attr("b", 3), attr("c", 4)]).unwrap()
}

pub fn micro_categories() -> CategorySet {
    CategorySet::new(vec!["upper".into(), "lower".into()]).unwrap()
}

/// Four tops and four bottoms of random 8×8 images; both categories occur on
/// both sides so every ordered category pair is reachable. Some attribute
/// labels are missing.
pub fn micro_corpus(seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for (side, prefix) in [(Side::Top, "t"), (Side::Bottom, "b")] {
        for i in 0..4 {
            let pixels = (0..8 * 8 * 3).map(|_| rng.random::<u8>()).collect();
            let labels = vec![Some(i % 2), if i == 3 { None } else { Some(i % 3) }, Some((i + 1) % 4)];
            items.push(Item {
                id: format!("{prefix}{i}"),
                side,
                image: Image::from_raw(8, pixels).unwrap(),
                category: i % 2,
                attribute_labels: labels,
            });
        }
    }
    let positives = vec![
        OutfitPair { top: 0, bottom: 4 },
        OutfitPair { top: 1, bottom: 5 },
        OutfitPair { top: 2, bottom: 7 },
        OutfitPair { top: 3, bottom: 6 },
    ];
    let splits = Splits { train: vec![0, 1, 2], valid: vec![], test: vec![3] };
    Corpus::new(micro_schema(), micro_categories(), items, positives, Some(splits), 0).unwrap()
}

pub fn micro_model(corpus: &Corpus, seed: u64, untied: bool) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig { untied_attention: untied, ..ModelConfig::micro() };
    let mut model = Model::init(config, corpus.schema.clone(), corpus.categories.clone(), &mut rng).unwrap();
    for t in 0..2 {
        for b in 0..2 {
            model.proj.ensure((t, b), &mut rng);
        }
    }
    model
}

pub const EPS: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Entries where both gradients are below this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn fd_batch() -> Vec<Triple> {
    vec![
        Triple { top: 0, pos_bottom: 4, neg_bottom: 5, neg_top: Some(3) },
        Triple { top: 1, pos_bottom: 5, neg_bottom: 6, neg_top: Some(2) },
        Triple { top: 2, pos_bottom: 7, neg_bottom: 4, neg_top: None },
    ]
}

pub fn fd_config(variant: AblationVariant, weights: LossWeights) -> TrainConfig {
    TrainConfig { variant, loss_weights: weights, negatives: NegativeSide::BothSides, ..TrainConfig::default() }
}

pub fn param_group(name: &str) -> &str {
    if name.starts_with("proj.cc.") {
        return name;
    }
    name.split('.').next().unwrap_or(name).trim_end_matches(|c: char| c.is_ascii_digit())
}

/// Central differences of the total loss on [`fd_batch`]: worst relative
/// error per parameter tensor, and that tensor's analytic gradient norm.
pub fn fd_check(corpus: &Corpus, model: &Model, cfg: &TrainConfig) -> Vec<(String, f64, f64)> {
    let batch = fd_batch();
    let (_, grad) = total_loss(corpus, &batch, model, cfg).unwrap();
    let analytic: Vec<Vec<f64>> = grad.named_params().iter().map(|p| p.data.to_vec()).collect();
    let loss = |m: &Model| total_loss(corpus, &batch, m, cfg).unwrap().0.total;
    let mut probe = model.clone();
    let names: Vec<String> = model.named_params().iter().map(|p| p.name.clone()).collect();
    let mut out = Vec::new();
    for (pi, name) in names.iter().enumerate() {
        let mut worst: f64 = 0.0;
        let mut norm = 0.0;
        for ei in 0..analytic[pi].len() {
            let orig = probe.named_params_mut()[pi].data[ei];
            probe.named_params_mut()[pi].data[ei] = orig + EPS;
            let up = loss(&probe);
            probe.named_params_mut()[pi].data[ei] = orig - EPS;
            let down = loss(&probe);
            probe.named_params_mut()[pi].data[ei] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let a = analytic[pi][ei];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if std::env::var("GRAD_DEBUG").is_ok() && err > 1e-6 {
                eprintln!("{name}[{ei}] analytic {a:e} numeric {numeric:e} err {err:e}");
            }
            worst = worst.max(err);
            norm += a * a;
        }
        out.push((name.clone(), worst, norm.sqrt()));
    }
    out
}

pub fn assert_matches(label: &str, results: &[(String, f64, f64)]) {
    for (name, err, _) in results {
        assert!(*err < TOLERANCE, "{label}: {name} relative error {err:e}");
    }
}

/// Loss components checked separately, then together.
pub const COMPONENTS: [(&str, LossWeights); 4] = [
    ("bpr", LossWeights { bpr: 1.0, category: 0.0, attribute: 0.0 }),
    ("category", LossWeights { bpr: 0.0, category: 1.0, attribute: 0.0 }),
    ("attribute", LossWeights { bpr: 0.0, category: 0.0, attribute: 1.0 }),
    ("total", LossWeights { bpr: 1.0, category: 1.0, attribute: 1.0 }),
];
