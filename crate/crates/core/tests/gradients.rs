//! Analytic gradients against central finite differences on the micro model.

mod common;

use afrec::compat::AblationVariant;
use afrec::training::LossWeights;
use common::{assert_matches, COMPONENTS, fd_check as check, fd_config as config, param_group as group};

#[test]
fn every_component_of_the_full_model_matches_finite_differences() {
    let corpus = common::micro_corpus(1);
    let model = common::micro_model(&corpus, 2, false);
    for (label, w) in COMPONENTS {
        let results = check(&corpus, &model, &config(AblationVariant::Full, w));
        assert_matches(label, &results);
        if label == "total" {
            // Every parameter tensor takes part in the objective.
            for (name, _, norm) in &results {
                assert!(*norm > 0.0, "{name} receives no gradient");
            }
            let groups: std::collections::BTreeSet<&str> = results.iter().map(|r| group(&r.0)).collect();
            let expected = ["attn", "backbone", "category_head", "proj", "sae"];
            assert!(expected.iter().all(|g| groups.contains(g)), "{groups:?}");
            assert_eq!(groups.iter().filter(|g| g.starts_with("proj.cc.")).count(), 4);
        }
    }
}

#[test]
fn every_variant_matches_finite_differences() {
    let corpus = common::micro_corpus(3);
    for variant in AblationVariant::ALL {
        let model = common::micro_model(&corpus, 4, false);
        let results = check(&corpus, &model, &config(variant, LossWeights::default()));
        assert_matches(variant.as_str(), &results);
    }
}

#[test]
fn untied_attention_matches_finite_differences() {
    let corpus = common::micro_corpus(5);
    let model = common::micro_model(&corpus, 6, true);
    let results = check(&corpus, &model, &config(AblationVariant::Full, LossWeights::default()));
    assert_matches("untied", &results);
    assert!(results.iter().any(|(n, _, norm)| n.starts_with("attn_bottom.") && *norm > 0.0));
}
