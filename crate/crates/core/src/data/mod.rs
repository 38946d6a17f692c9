//! Garment corpus: attribute schema, items, positive top/bottom pairs and
//! their train/validation/test split.

mod image;
mod manifest;
mod sampling;
pub mod synth;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AfrecError, Result};

pub use self::image::Image;
pub use self::manifest::{load_corpus, load_corpus_seeded, save_corpus, MANIFEST_FILE};
pub use self::sampling::{sample_training_triples, NegativeSide, Triple, TripleSampler};

/// Seed used to split positives when a manifest carries no explicit split.
pub const DEFAULT_SPLIT_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<String>,
}

/// The ordered attribute set. Index `k` of an attribute is fixed for the
/// lifetime of a schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub attributes: Vec<Attribute>,
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(AfrecError::SchemaViolation("schema has no attributes".into()));
        }
        let mut names = std::collections::HashSet::new();
        for attr in &attributes {
            if !names.insert(attr.name.as_str()) {
                return Err(AfrecError::SchemaViolation(format!(
                    "duplicate attribute `{}`",
                    attr.name
                )));
            }
            if attr.values.len() < 2 {
                return Err(AfrecError::SchemaViolation(format!(
                    "attribute `{}` needs at least two values",
                    attr.name
                )));
            }
            let mut values = std::collections::HashSet::new();
            for v in &attr.values {
                if !values.insert(v.as_str()) {
                    return Err(AfrecError::SchemaViolation(format!(
                        "attribute `{}` repeats value `{v}`",
                        attr.name
                    )));
                }
            }
        }
        Ok(Self { attributes })
    }

    /// Number of attributes (K).
    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    /// Vocabulary size of each attribute, in schema order.
    pub fn value_counts(&self) -> Vec<usize> {
        self.attributes.iter().map(|a| a.values.len()).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.attributes.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn value_index(&self, attribute: usize, value: &str) -> Option<usize> {
        self.attributes[attribute].values.iter().position(|v| v == value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySet {
    pub categories: Vec<String>,
}

impl CategorySet {
    pub fn new(categories: Vec<String>) -> Result<Self> {
        if categories.is_empty() {
            return Err(AfrecError::SchemaViolation("no categories".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &categories {
            if !seen.insert(c.as_str()) {
                return Err(AfrecError::SchemaViolation(format!("duplicate category `{c}`")));
            }
        }
        Ok(Self { categories })
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.categories[index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Top,
    Bottom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    pub side: Side,
    pub image: Image,
    pub category: usize,
    /// One optional value index per schema attribute; `None` is an unlabelled
    /// attribute and is left out of the attribute loss.
    pub attribute_labels: Vec<Option<usize>>,
}

/// A positive top/bottom pair, by index into [`Corpus::items`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OutfitPair {
    pub top: usize,
    pub bottom: usize,
}

/// Disjoint index sets over [`Corpus::positives`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Splits {
    /// Seeded 80/10/10 split of `n` positives.
    pub fn random(n: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (n as f64 * 0.8).round() as usize;
        let n_valid = ((n as f64 * 0.1).round() as usize).min(n - n_train);
        let mut train = order[..n_train].to_vec();
        let mut valid = order[n_train..n_train + n_valid].to_vec();
        let mut test = order[n_train + n_valid..].to_vec();
        train.sort_unstable();
        valid.sort_unstable();
        test.sort_unstable();
        Self { train, valid, test }
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn validate(&self, n_positives: usize) -> Result<()> {
        let mut seen = vec![false; n_positives];
        for &i in self.train.iter().chain(&self.valid).chain(&self.test) {
            if i >= n_positives {
                return Err(AfrecError::SchemaViolation(format!(
                    "split index {i} out of range for {n_positives} positives"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(AfrecError::SchemaViolation(format!(
                    "positive {i} assigned to more than one split"
                )));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(AfrecError::SchemaViolation(format!(
                "positive {missing} is not assigned to any split"
            )));
        }
        Ok(())
    }
}

/// An immutable, validated garment corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub schema: AttributeSchema,
    pub categories: CategorySet,
    pub items: Vec<Item>,
    pub positives: Vec<OutfitPair>,
    pub splits: Splits,
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Validates and assembles a corpus. Without explicit `splits`, positives
    /// are split 80/10/10 with `split_seed`.
    pub fn new(
        schema: AttributeSchema,
        categories: CategorySet,
        items: Vec<Item>,
        positives: Vec<OutfitPair>,
        splits: Option<Splits>,
        split_seed: u64,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        let mut image_size = None;
        for (i, item) in items.iter().enumerate() {
            if index.insert(item.id.clone(), i).is_some() {
                return Err(AfrecError::SchemaViolation(format!("duplicate item id `{}`", item.id)));
            }
            if item.category >= categories.len() {
                return Err(AfrecError::SchemaViolation(format!(
                    "item `{}` has category index {} out of range",
                    item.id, item.category
                )));
            }
            if item.attribute_labels.len() != schema.len() {
                return Err(AfrecError::SchemaViolation(format!(
                    "item `{}` has {} attribute slots, schema has {}",
                    item.id,
                    item.attribute_labels.len(),
                    schema.len()
                )));
            }
            for (k, label) in item.attribute_labels.iter().enumerate() {
                if let Some(v) = label {
                    if *v >= schema.attributes[k].values.len() {
                        return Err(AfrecError::SchemaViolation(format!(
                            "item `{}` has value index {v} out of range for `{}`",
                            item.id, schema.attributes[k].name
                        )));
                    }
                }
            }
            match image_size {
                None => image_size = Some(item.image.size()),
                Some(s) if s != item.image.size() => {
                    return Err(AfrecError::SchemaViolation(format!(
                        "item `{}` image is {}x{}, corpus images are {s}x{s}",
                        item.id,
                        item.image.size(),
                        item.image.size()
                    )))
                }
                Some(_) => {}
            }
        }
        if positives.is_empty() {
            return Err(AfrecError::EmptyCorpus);
        }
        for pair in &positives {
            let top_ok = items.get(pair.top).is_some_and(|i| i.side == Side::Top);
            if !top_ok {
                return Err(AfrecError::DanglingPairReference(format!("top #{}", pair.top)));
            }
            let bottom_ok = items.get(pair.bottom).is_some_and(|i| i.side == Side::Bottom);
            if !bottom_ok {
                return Err(AfrecError::DanglingPairReference(format!("bottom #{}", pair.bottom)));
            }
        }
        let splits = match splits {
            Some(s) => {
                s.validate(positives.len())?;
                s
            }
            None => Splits::random(positives.len(), split_seed),
        };
        Ok(Self {
            schema,
            categories,
            items,
            positives,
            splits,
            index,
        })
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn item(&self, id: &str) -> Option<&Item> {
        self.item_index(id).map(|i| &self.items[i])
    }

    /// Side length of the (square) item images.
    pub fn image_size(&self) -> usize {
        self.items.first().map_or(0, |i| i.image.size())
    }

    /// Item indices of one side, in corpus order.
    pub fn side_indices(&self, side: Side) -> Vec<usize> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.side == side)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_pairs(&self, split: Split) -> Vec<OutfitPair> {
        self.splits.get(split).iter().map(|&i| self.positives[i]).collect()
    }

    /// Sorted, de-duplicated items referenced by the positives of a split.
    pub fn split_items(&self, split: Split) -> Vec<usize> {
        let mut items: Vec<usize> = self
            .splits
            .get(split)
            .iter()
            .flat_map(|&i| [self.positives[i].top, self.positives[i].bottom])
            .collect();
        items.sort_unstable();
        items.dedup();
        items
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_rejects_duplicates_and_unary_attributes() {
        let dup = AttributeSchema::new(vec![
            Attribute { name: "a".into(), values: vec!["x".into(), "y".into()] },
            Attribute { name: "a".into(), values: vec!["x".into(), "y".into()] },
        ]);
        assert!(matches!(dup, Err(AfrecError::SchemaViolation(_))));
        let unary = AttributeSchema::new(vec![Attribute { name: "a".into(), values: vec!["x".into()] }]);
        assert!(matches!(unary, Err(AfrecError::SchemaViolation(_))));
        let repeated = AttributeSchema::new(vec![Attribute {
            name: "a".into(),
            values: vec!["x".into(), "x".into()],
        }]);
        assert!(matches!(repeated, Err(AfrecError::SchemaViolation(_))));
        assert!(AttributeSchema::new(vec![]).is_err());
    }

    #[test]
    fn random_splits_partition_positives() {
        for n in [1, 2, 7, 10, 123] {
            let s = Splits::random(n, 3);
            s.validate(n).unwrap();
            assert_eq!(s.train.len(), (n as f64 * 0.8).round() as usize);
        }
        assert_eq!(Splits::random(50, 9), Splits::random(50, 9));
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let s = Splits { train: vec![0, 1], valid: vec![1], test: vec![] };
        assert!(s.validate(2).is_err());
        let s = Splits { train: vec![0], valid: vec![], test: vec![] };
        assert!(s.validate(2).is_err());
    }
}
