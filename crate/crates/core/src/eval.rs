//! Ranking protocol: each held-out positive pair is ranked against sampled
//! negative bottoms; hit rate at K and pooled AUC summarise the ranks.

use std::collections::{BTreeSet, HashMap};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compat::AblationVariant;
use crate::data::{Corpus, Side, Split};
use crate::error::{AfrecError, Result};
use crate::model::{ItemRepr, Model};

pub const DEFAULT_NEGATIVES: usize = 100;
pub const REPORT_KS: [usize; 4] = [5, 10, 20, 40];

/// One positive pair with its negatives; `scores[0]` is the positive.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedCase {
    pub top_id: String,
    pub positive_id: String,
    pub negative_ids: Vec<String>,
    pub scores: Option<Vec<f64>>,
}

impl RankedCase {
    fn scored(&self, index: usize) -> Result<(f64, &[f64])> {
        match &self.scores {
            Some(s) if s.len() == self.negative_ids.len() + 1 => Ok((s[0], &s[1..])),
            _ => Err(AfrecError::UnscoredCase(index)),
        }
    }

    /// 1-based rank of the positive; ties count against it.
    pub fn rank(&self) -> Option<usize> {
        let s = self.scores.as_ref()?;
        Some(1 + s[1..].iter().filter(|&&n| n >= s[0]).count())
    }
}

/// One case per positive pair of `split`, with `n_negatives` bottoms drawn
/// without replacement from those never observed positive with the top.
pub fn build_cases(corpus: &Corpus, split: Split, n_negatives: usize, seed: u64) -> Result<Vec<RankedCase>> {
    let pairs = corpus.split_pairs(split);
    if pairs.is_empty() {
        return Err(AfrecError::EmptyCorpus);
    }
    let matched = positives_by_top(corpus);
    let bottoms = corpus.side_indices(Side::Bottom);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = |i: usize| corpus.items[i].id.clone();
    pairs
        .iter()
        .map(|p| {
            let excluded = &matched[&p.top];
            let free: Vec<usize> = bottoms.iter().copied().filter(|b| !excluded.contains(b)).collect();
            if free.len() < n_negatives {
                return Err(AfrecError::InsufficientNegatives {
                    top: id(p.top),
                    needed: n_negatives,
                    available: free.len(),
                });
            }
            let negative_ids = index::sample(&mut rng, free.len(), n_negatives).into_iter().map(|j| id(free[j])).collect();
            Ok(RankedCase { top_id: id(p.top), positive_id: id(p.bottom), negative_ids, scores: None })
        })
        .collect()
}

/// Largest negative count [`build_cases`] accepts for `split`, or `None`
/// when the split has no positive pairs.
pub fn available_negatives(corpus: &Corpus, split: Split) -> Option<usize> {
    let matched = positives_by_top(corpus);
    let n_bottoms = corpus.side_indices(Side::Bottom).len();
    corpus.split_pairs(split).iter().map(|p| n_bottoms - matched[&p.top].len()).min()
}

fn positives_by_top(corpus: &Corpus) -> HashMap<usize, BTreeSet<usize>> {
    let mut matched: HashMap<usize, BTreeSet<usize>> = HashMap::new();
    for p in &corpus.positives {
        matched.entry(p.top).or_default().insert(p.bottom);
    }
    matched
}

/// Fills in the scores of every case. Each item is embedded once.
pub fn score_cases(model: &Model, corpus: &Corpus, cases: &mut [RankedCase], variant: AblationVariant) -> Result<()> {
    let lookup = |id: &str| {
        corpus.item_index(id).ok_or_else(|| AfrecError::DanglingPairReference(id.to_string()))
    };
    let mut needed = BTreeSet::new();
    for c in cases.iter() {
        needed.insert(lookup(&c.top_id)?);
        needed.insert(lookup(&c.positive_id)?);
        for n in &c.negative_ids {
            needed.insert(lookup(n)?);
        }
    }
    let needed: Vec<usize> = needed.into_iter().collect();
    let reprs: Vec<ItemRepr> =
        needed.par_iter().map(|&i| model.embed(&corpus.items[i].image)).collect::<Result<_>>()?;
    let repr: HashMap<usize, &ItemRepr> = needed.iter().copied().zip(reprs.iter()).collect();
    let category = |i: usize| corpus.items[i].category;
    let scored: Vec<Vec<f64>> = cases
        .par_iter()
        .map(|c| {
            let t = lookup(&c.top_id)?;
            std::iter::once(&c.positive_id)
                .chain(&c.negative_ids)
                .map(|b| {
                    let b = lookup(b)?;
                    Ok(model.pair_forward(repr[&t], repr[&b], (category(t), category(b)), variant)?.0.score)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    for (c, s) in cases.iter_mut().zip(scored) {
        c.scores = Some(s);
    }
    Ok(())
}

/// Fraction of cases whose positive ranks within the top `k`.
pub fn hit_rate(cases: &[RankedCase], k: usize) -> Result<f64> {
    if cases.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, c) in cases.iter().enumerate() {
        let (pos, negs) = c.scored(i)?;
        let rank = 1 + negs.iter().filter(|&&n| n >= pos).count();
        if rank <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / cases.len() as f64)
}

/// Correctly ordered (positive, negative) pairs over all comparisons, pooled
/// across cases. Ties count as incorrect.
pub fn auc(cases: &[RankedCase]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (i, c) in cases.iter().enumerate() {
        let (pos, negs) = c.scored(i)?;
        correct += negs.iter().filter(|&&n| pos > n).count();
        total += negs.len();
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    #[serde(rename = "hr@5")]
    pub hr5: f64,
    #[serde(rename = "hr@10")]
    pub hr10: f64,
    #[serde(rename = "hr@20")]
    pub hr20: f64,
    #[serde(rename = "hr@40")]
    pub hr40: f64,
    pub n_cases: usize,
    pub seed: u64,
}

impl MetricsReport {
    pub fn from_cases(cases: &[RankedCase], seed: u64) -> Result<Self> {
        Ok(Self {
            auc: auc(cases)?,
            hr5: hit_rate(cases, 5)?,
            hr10: hit_rate(cases, 10)?,
            hr20: hit_rate(cases, 20)?,
            hr40: hit_rate(cases, 40)?,
            n_cases: cases.len(),
            seed,
        })
    }

    pub fn hr(&self, k: usize) -> Option<f64> {
        match k {
            5 => Some(self.hr5),
            10 => Some(self.hr10),
            20 => Some(self.hr20),
            40 => Some(self.hr40),
            _ => None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}

/// Scores `model` on the test split under the standard protocol.
pub fn evaluate_model(model: &Model, corpus: &Corpus, variant: AblationVariant, seed: u64) -> Result<MetricsReport> {
    check_schema(model, corpus)?;
    let mut cases = build_cases(corpus, Split::Test, DEFAULT_NEGATIVES, seed)?;
    score_cases(model, corpus, &mut cases, variant)?;
    MetricsReport::from_cases(&cases, seed)
}

/// [`evaluate_model`] on a loaded checkpoint, under the variant it was
/// trained with.
pub fn evaluate(checkpoint: &crate::checkpoint::Checkpoint, corpus: &Corpus, seed: u64) -> Result<MetricsReport> {
    evaluate_model(&checkpoint.model, corpus, checkpoint.variant(), seed)
}

pub fn check_schema(model: &Model, corpus: &Corpus) -> Result<()> {
    if model.schema != corpus.schema {
        return Err(AfrecError::SchemaMismatch("attribute schema differs".into()));
    }
    if model.categories != corpus.categories {
        return Err(AfrecError::SchemaMismatch("category set differs".into()));
    }
    if model.config.image_size != corpus.image_size() {
        return Err(AfrecError::SchemaMismatch(format!(
            "model expects {0}x{0} images, corpus has {1}x{1}",
            model.config.image_size,
            corpus.image_size()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(scores: Vec<f64>) -> RankedCase {
        RankedCase {
            top_id: "t".into(),
            positive_id: "p".into(),
            negative_ids: (1..scores.len()).map(|i| format!("n{i}")).collect(),
            scores: Some(scores),
        }
    }

    fn ranked(rank: usize, n: usize) -> RankedCase {
        let mut s = vec![0.0; n + 1];
        s[0] = (n - rank + 1) as f64 + 0.5;
        for (j, v) in s[1..].iter_mut().enumerate() {
            *v = (n - j) as f64;
        }
        case(s)
    }

    #[test]
    fn hand_ranked_hit_rates() {
        let cases = [ranked(3, 100), ranked(11, 100)];
        assert_eq!(cases[0].rank(), Some(3));
        assert_eq!(cases[1].rank(), Some(11));
        assert_eq!(hit_rate(&cases, 5).unwrap(), 0.5);
        assert_eq!(hit_rate(&cases, 10).unwrap(), 0.5);
        assert_eq!(hit_rate(&cases, 20).unwrap(), 1.0);
    }

    #[test]
    fn ties_count_against_the_positive() {
        let cases = [case(vec![1.0; 101])];
        for k in [1, 5, 10, 40, 100] {
            assert_eq!(hit_rate(&cases, k).unwrap(), 0.0);
        }
        assert_eq!(hit_rate(&cases, 101).unwrap(), 1.0);
        assert_eq!(auc(&cases).unwrap(), 0.0);
    }

    #[test]
    fn perfect_and_hand_auc() {
        let best = [case(vec![5.0, 1.0, 2.0, 3.0])];
        assert_eq!(auc(&best).unwrap(), 1.0);
        assert_eq!(hit_rate(&best, 1).unwrap(), 1.0);
        assert_eq!(auc(&[case(vec![0.9, 0.1, 0.95])]).unwrap(), 0.5);
    }

    #[test]
    fn unscored_case_is_an_error() {
        let mut c = case(vec![1.0, 0.0]);
        c.scores = None;
        assert!(matches!(auc(&[c.clone()]), Err(AfrecError::UnscoredCase(0))));
        assert!(matches!(hit_rate(&[case(vec![1.0, 0.0]), c], 5), Err(AfrecError::UnscoredCase(1))));
    }

    #[test]
    fn report_json_has_fixed_keys() {
        let r = MetricsReport::from_cases(&[ranked(3, 100), ranked(11, 100)], 7).unwrap();
        let json = r.to_json();
        let keys: Vec<usize> = ["\"auc\"", "\"hr@5\"", "\"hr@10\"", "\"hr@20\"", "\"hr@40\"", "\"n_cases\"", "\"seed\""]
            .iter()
            .map(|k| json.find(k).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.hr(20), Some(1.0));
    }
}
