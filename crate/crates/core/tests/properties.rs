//! Randomised invariants.

use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use afrec::attention::{reciprocal_attention, AttentionParams};
use afrec::attributes::AttributeMatrix;
use afrec::backbone::{global_average_pool, FeatureMap, GlobalEmbedding};
use afrec::eval::{auc, hit_rate, RankedCase};
use afrec::explain::{min_max_scale, rank_entries};
use afrec::nn::softmax;
use afrec::training::bpr_loss;

fn case(scores: Vec<f64>) -> RankedCase {
    let n = scores.len() - 1;
    RankedCase {
        top_id: "t".into(),
        positive_id: "p".into(),
        negative_ids: (0..n).map(|i| format!("n{i}")).collect(),
        scores: Some(scores),
    }
}

fn cases_strategy(max_cases: usize) -> impl Strategy<Value = Vec<RankedCase>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 2..30), 1..max_cases)
        .prop_map(|v| v.into_iter().map(case).collect())
}

fn with_scores(cases: &[RankedCase], f: impl Fn(f64) -> f64) -> Vec<RankedCase> {
    cases.iter().map(|c| case(c.scores.as_ref().unwrap().iter().map(|&s| f(s)).collect())).collect()
}

fn distinct(scores: &[f64]) -> bool {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.windows(2).all(|w| w[0] < w[1])
}

proptest! {
    #[test]
    fn pooled_value_lies_between_extremes_and_ignores_positions(
        values in prop::collection::vec(-5.0..5.0f64, 2 * 9),
        seed in any::<u64>(),
    ) {
        let map = Array3::from_shape_vec((2, 3, 3), values).unwrap();
        let pooled = global_average_pool(&FeatureMap(map.clone()));
        for c in 0..2 {
            let ch = map.index_axis(ndarray::Axis(0), c);
            let lo = ch.fold(f64::INFINITY, |a, &b| a.min(b));
            let hi = ch.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            prop_assert!(lo - 1e-12 <= pooled.0[c] && pooled.0[c] <= hi + 1e-12);
        }
        // The same spatial permutation applied to every channel.
        let mut perm: Vec<usize> = (0..9).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = Array3::from_shape_fn((2, 3, 3), |(c, y, x)| {
            let p = perm[y * 3 + x];
            map[[c, p / 3, p % 3]]
        });
        let again = global_average_pool(&FeatureMap(shuffled));
        for c in 0..2 {
            prop_assert!((again.0[c] - pooled.0[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-1e3..1e3f64, 1..50)) {
        let p = softmax(Array1::from(v).view());
        prop_assert!((p.sum() - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn attention_vectors_are_distributions(k in 1usize..6, d in 1usize..6, seed in any::<u64>(), scale in 0.1..10.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = AttentionParams::init(d, &mut rng);
        let rand_mat = |rng: &mut ChaCha8Rng, r: usize| {
            Array2::from_shape_fn((r, d), |_| scale * (rand::Rng::random::<f64>(rng) - 0.5))
        };
        let at = AttributeMatrix(rand_mat(&mut rng, k));
        let ab = AttributeMatrix(rand_mat(&mut rng, k));
        let gt = GlobalEmbedding(rand_mat(&mut rng, 1).row(0).to_owned());
        let gb = GlobalEmbedding(rand_mat(&mut rng, 1).row(0).to_owned());
        let (a, b) = reciprocal_attention((&at, &gt), (&ab, &gb), &params).unwrap();
        for alpha in [a, b] {
            prop_assert_eq!(alpha.0.len(), k);
            prop_assert!((alpha.0.sum() - 1.0).abs() <= 1e-6);
            prop_assert!(alpha.0.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn hit_rate_is_monotone_in_k(cases in cases_strategy(40)) {
        let hr: Vec<f64> = (1..=31).map(|k| hit_rate(&cases, k).unwrap()).collect();
        prop_assert!(hr.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(hr.iter().all(|h| (0.0..=1.0).contains(h)));
    }

    #[test]
    fn full_list_is_always_a_hit_without_ties(cases in cases_strategy(20)) {
        prop_assume!(cases.iter().all(|c| distinct(c.scores.as_ref().unwrap())));
        let n = cases.iter().map(|c| c.negative_ids.len() + 1).max().unwrap();
        prop_assert_eq!(hit_rate(&cases, n).unwrap(), 1.0);
    }

    #[test]
    fn auc_ignores_strictly_increasing_transforms(cases in cases_strategy(20)) {
        let base = auc(&cases).unwrap();
        prop_assert_eq!(auc(&with_scores(&cases, |s| 2.0 * s + 1.0)).unwrap(), base);
        prop_assert_eq!(auc(&with_scores(&cases, f64::tanh)).unwrap(), base);
    }

    #[test]
    fn case_auc_follows_from_rank(scores in prop::collection::vec(-3.0..3.0f64, 2..60)) {
        prop_assume!(distinct(&scores));
        let c = case(scores);
        let n = c.negative_ids.len() as f64;
        let r = c.rank().unwrap() as f64;
        prop_assert!((auc(std::slice::from_ref(&c)).unwrap() - (n - r + 1.0) / n).abs() < 1e-12);
    }

    #[test]
    fn rescaling_preserves_order(values in prop::collection::vec(-10.0..10.0f64, 1..=36), k in 1usize..=6) {
        prop_assume!(values.len() >= k * k);
        let m = Array2::from_shape_vec((k, k), values[..k * k].to_vec()).unwrap();
        let s = min_max_scale(&m);
        prop_assert!(s.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let order_raw: Vec<(usize, usize)> = rank_entries(&m).into_iter().map(|(r, c, _)| (r, c)).collect();
        let order_scaled: Vec<(usize, usize)> = rank_entries(&s).into_iter().map(|(r, c, _)| (r, c)).collect();
        if distinct(m.as_slice().unwrap()) {
            prop_assert_eq!(order_raw, order_scaled);
        } else {
            prop_assert_eq!(order_raw[0], order_scaled[0]);
        }
    }

    #[test]
    fn bpr_is_below_ln2_exactly_when_the_positive_wins(pos in -20.0..20.0f64, neg in -20.0..20.0f64) {
        let l = bpr_loss(&[pos], &[neg]).unwrap();
        prop_assert!(l > 0.0 && l.is_finite());
        if pos != neg {
            prop_assert_eq!(l < std::f64::consts::LN_2, pos > neg);
        }
    }
}
