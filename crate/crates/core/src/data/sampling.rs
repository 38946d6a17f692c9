use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, OutfitPair, Side, Split};
use crate::error::{AfrecError, Result};

/// Which corrupted pairs accompany each observed pair during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSide {
    /// Only `(top, negative bottom)`.
    BottomOnly,
    /// Both `(top, negative bottom)` and `(negative top, bottom)`.
    #[default]
    BothSides,
}

/// One training instance, by item index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub top: usize,
    pub pos_bottom: usize,
    pub neg_bottom: usize,
    pub neg_top: Option<usize>,
}

/// Draws corrupted pairs for the training split. Negatives are uniform over
/// the items of the other side that do not form a training positive with the
/// anchor.
#[derive(Debug, Clone)]
pub struct TripleSampler {
    pairs: Vec<OutfitPair>,
    tops: Vec<usize>,
    bottoms: Vec<usize>,
    bottoms_of_top: HashMap<usize, BTreeSet<usize>>,
    tops_of_bottom: HashMap<usize, BTreeSet<usize>>,
    names: Vec<String>,
}

impl TripleSampler {
    pub fn new(corpus: &Corpus) -> Result<Self> {
        let pairs = corpus.split_pairs(Split::Train);
        if pairs.is_empty() {
            return Err(AfrecError::EmptyCorpus);
        }
        let mut bottoms_of_top: HashMap<usize, BTreeSet<usize>> = HashMap::new();
        let mut tops_of_bottom: HashMap<usize, BTreeSet<usize>> = HashMap::new();
        for p in &pairs {
            bottoms_of_top.entry(p.top).or_default().insert(p.bottom);
            tops_of_bottom.entry(p.bottom).or_default().insert(p.top);
        }
        Ok(Self {
            pairs,
            tops: corpus.side_indices(Side::Top),
            bottoms: corpus.side_indices(Side::Bottom),
            bottoms_of_top,
            tops_of_bottom,
            names: corpus.items.iter().map(|i| i.id.clone()).collect(),
        })
    }

    pub fn train_pairs(&self) -> &[OutfitPair] {
        &self.pairs
    }

    fn negative(
        &self,
        anchor: usize,
        candidates: &[usize],
        excluded: Option<&BTreeSet<usize>>,
        rng: &mut impl Rng,
    ) -> Result<usize> {
        let n_excluded = excluded.map_or(0, |e| e.len());
        if n_excluded >= candidates.len() {
            return Err(AfrecError::NoNegativeAvailable(self.names[anchor].clone()));
        }
        let Some(excluded) = excluded else {
            return Ok(candidates[rng.random_range(0..candidates.len())]);
        };
        if 2 * n_excluded <= candidates.len() {
            // rejection keeps the draw uniform over the complement
            loop {
                let c = candidates[rng.random_range(0..candidates.len())];
                if !excluded.contains(&c) {
                    return Ok(c);
                }
            }
        }
        let free: Vec<usize> = candidates.iter().copied().filter(|c| !excluded.contains(c)).collect();
        Ok(free[rng.random_range(0..free.len())])
    }

    pub fn sample(&self, pair: OutfitPair, side: NegativeSide, rng: &mut impl Rng) -> Result<Triple> {
        let neg_bottom = self.negative(pair.top, &self.bottoms, self.bottoms_of_top.get(&pair.top), rng)?;
        let neg_top = match side {
            NegativeSide::BottomOnly => None,
            NegativeSide::BothSides => {
                Some(self.negative(pair.bottom, &self.tops, self.tops_of_bottom.get(&pair.bottom), rng)?)
            }
        };
        Ok(Triple {
            top: pair.top,
            pos_bottom: pair.bottom,
            neg_bottom,
            neg_top,
        })
    }

    /// Every training positive once, in shuffled order, with fresh negatives.
    pub fn epoch(&self, side: NegativeSide, rng: &mut impl Rng) -> Result<Vec<Triple>> {
        let mut order = self.pairs.clone();
        order.shuffle(rng);
        order.into_iter().map(|p| self.sample(p, side, rng)).collect()
    }
}

/// Draws `batch_size` training positives uniformly (with replacement) and
/// corrupts each on both sides.
pub fn sample_training_triples(corpus: &Corpus, batch_size: usize, rng_seed: u64) -> Result<Vec<Triple>> {
    let sampler = TripleSampler::new(corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..batch_size)
        .map(|_| {
            let pair = sampler.pairs[rng.random_range(0..sampler.pairs.len())];
            sampler.sample(pair, NegativeSide::BothSides, &mut rng)
        })
        .collect()
}
