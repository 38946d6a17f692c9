//! JSON manifest reader/writer. A manifest lists the schema, categories,
//! items (with image paths relative to the manifest), positives and an
//! optional split.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Attribute, AttributeSchema, CategorySet, Corpus, Image, Item, OutfitPair, Side, Splits,
    DEFAULT_SPLIT_SEED,
};
use crate::error::{AfrecError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDoc {
    schema: SchemaDoc,
    categories: Vec<String>,
    items: Vec<ItemDoc>,
    positives: Vec<PairDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    splits: Option<Splits>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SchemaDoc {
    attributes: Vec<Attribute>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ItemDoc {
    id: String,
    side: Side,
    image: String,
    category: String,
    #[serde(default)]
    attributes: BTreeMap<String, Option<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PairDoc {
    top: String,
    bottom: String,
}

/// Loads and validates a manifest; positives without an explicit split are
/// split with [`DEFAULT_SPLIT_SEED`].
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus> {
    load_corpus_seeded(manifest_path, DEFAULT_SPLIT_SEED)
}

pub fn load_corpus_seeded(manifest_path: &Path, split_seed: u64) -> Result<Corpus> {
    let text = fs::read_to_string(manifest_path)?;
    let doc: ManifestDoc = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let schema = AttributeSchema::new(doc.schema.attributes)?;
    let categories = CategorySet::new(doc.categories)?;

    let mut items = Vec::with_capacity(doc.items.len());
    for it in doc.items {
        let category = categories.index_of(&it.category).ok_or_else(|| {
            AfrecError::SchemaViolation(format!("item `{}` has unknown category `{}`", it.id, it.category))
        })?;
        let mut labels = vec![None; schema.len()];
        for (name, value) in &it.attributes {
            let k = schema.attribute_index(name).ok_or_else(|| {
                AfrecError::SchemaViolation(format!("item `{}` has unknown attribute `{name}`", it.id))
            })?;
            if let Some(value) = value {
                labels[k] = Some(schema.value_index(k, value).ok_or_else(|| {
                    AfrecError::SchemaViolation(format!(
                        "item `{}` has unknown value `{value}` for `{name}`",
                        it.id
                    ))
                })?);
            }
        }
        let image = Image::load_png(&base.join(&it.image))?;
        items.push(Item {
            id: it.id,
            side: it.side,
            image,
            category,
            attribute_labels: labels,
        });
    }

    let lookup: std::collections::HashMap<&str, (usize, Side)> = items
        .iter()
        .enumerate()
        .map(|(i, it)| (it.id.as_str(), (i, it.side)))
        .collect();
    let mut positives = Vec::with_capacity(doc.positives.len());
    for p in &doc.positives {
        let top = match lookup.get(p.top.as_str()) {
            Some(&(i, Side::Top)) => i,
            _ => return Err(AfrecError::DanglingPairReference(p.top.clone())),
        };
        let bottom = match lookup.get(p.bottom.as_str()) {
            Some(&(i, Side::Bottom)) => i,
            _ => return Err(AfrecError::DanglingPairReference(p.bottom.clone())),
        };
        positives.push(OutfitPair { top, bottom });
    }

    Corpus::new(schema, categories, items, positives, doc.splits, split_seed)
}

/// Writes `dir/manifest.json` and one PNG per item under `dir/images/`.
/// Loading the written manifest yields a corpus equal to `corpus`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<std::path::PathBuf> {
    let image_dir = dir.join("images");
    fs::create_dir_all(&image_dir)?;
    let mut items = Vec::with_capacity(corpus.items.len());
    for it in &corpus.items {
        let rel = format!("images/{}.png", it.id);
        it.image.save_png(&dir.join(&rel))?;
        let attributes = it
            .attribute_labels
            .iter()
            .enumerate()
            .filter_map(|(k, label)| {
                label.map(|v| {
                    let attr = &corpus.schema.attributes[k];
                    (attr.name.clone(), Some(attr.values[v].clone()))
                })
            })
            .collect();
        items.push(ItemDoc {
            id: it.id.clone(),
            side: it.side,
            image: rel,
            category: corpus.categories.name(it.category).to_string(),
            attributes,
        });
    }
    let doc = ManifestDoc {
        schema: SchemaDoc {
            attributes: corpus.schema.attributes.clone(),
        },
        categories: corpus.categories.categories.clone(),
        items,
        positives: corpus
            .positives
            .iter()
            .map(|p| PairDoc {
                top: corpus.items[p.top].id.clone(),
                bottom: corpus.items[p.bottom].id.clone(),
            })
            .collect(),
        splits: Some(corpus.splits.clone()),
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&doc)?)?;
    Ok(path)
}
