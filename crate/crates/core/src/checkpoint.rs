//! Checkpoint container: a JSON header followed by named little-endian `f64`
//! arrays.
//!
//! ```text
//! "AFRECKPT" | version: u32 LE | header length: u64 LE | header JSON | data
//! ```
//!
//! Entry offsets are byte offsets into the data section. Saving a loaded
//! checkpoint reproduces the input bytes exactly.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compat::AblationVariant;
use crate::data::{AttributeSchema, CategorySet, Corpus};
use crate::error::{AfrecError, Result};
use crate::model::{Model, ModelConfig};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 8] = b"AFRECKPT";
pub const VERSION: u32 = 1;

/// Position of a [`ChaCha8Rng`] stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex of the 32-byte key.
    pub seed: String,
    pub stream: u64,
    /// Decimal; exceeds `u64`.
    pub word_pos: String,
}

impl RngState {
    pub fn of(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex(&rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || AfrecError::Checkpoint("invalid generator state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of the canonical JSON of schema and categories.
pub fn schema_fingerprint(schema: &AttributeSchema, categories: &CategorySet) -> String {
    let canonical = serde_json::to_vec(&(schema, categories)).expect("schema serialises");
    hex(&Sha256::digest(&canonical))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema_fingerprint: String,
    schema: AttributeSchema,
    categories: CategorySet,
    model: ModelConfig,
    train: Option<TrainConfig>,
    epoch: usize,
    rng: RngState,
    entries: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Epoch the parameters come from (0 = initialisation).
    pub epoch: usize,
    pub rng: RngState,
    pub train_config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn variant(&self) -> AblationVariant {
        self.train_config.as_ref().map_or(AblationVariant::Full, |c| c.variant)
    }

    pub fn fingerprint(&self) -> String {
        schema_fingerprint(&self.model.schema, &self.model.categories)
    }

    /// Fails with `SchemaMismatch` unless the corpus uses the same schema,
    /// categories and image size.
    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        if self.fingerprint() != schema_fingerprint(&corpus.schema, &corpus.categories) {
            return Err(AfrecError::SchemaMismatch("schema fingerprint differs".into()));
        }
        crate::eval::check_schema(&self.model, corpus)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.named_params();
        let mut entries = Vec::with_capacity(params.len());
        let mut offset = 0u64;
        for p in &params {
            entries.push(Entry { name: p.name.clone(), shape: p.shape.clone(), offset });
            offset += 8 * p.data.len() as u64;
        }
        let header = Header {
            schema_fingerprint: self.fingerprint(),
            schema: self.model.schema.clone(),
            categories: self.model.categories.clone(),
            model: self.model.config.clone(),
            train: self.train_config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            entries,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &params {
            for v in p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| AfrecError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..data_start])?;
        if header.schema_fingerprint != schema_fingerprint(&header.schema, &header.categories) {
            return Err(AfrecError::SchemaMismatch("stored fingerprint does not match stored schema".into()));
        }
        let data = &bytes[data_start..];

        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Model::init(header.model.clone(), header.schema.clone(), header.categories.clone(), &mut rng)?;
        for e in &header.entries {
            if let Some(cats) = model.proj.parse_param_name(&e.name) {
                model.proj.pairs.insert(cats, Array2::zeros((model.dim(), model.dim())));
            } else if e.name.starts_with("proj.cc.") {
                return Err(bad(&format!("unknown category pair `{}`", e.name)));
            }
        }
        let by_name: HashMap<&str, &Entry> = header.entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut params = model.named_params_mut();
        if params.len() != header.entries.len() {
            return Err(bad(&format!("expected {} arrays, found {}", params.len(), header.entries.len())));
        }
        for p in &mut params {
            let e = by_name.get(p.name.as_str()).ok_or_else(|| bad(&format!("missing array `{}`", p.name)))?;
            if e.shape.iter().product::<usize>() != p.data.len() {
                return Err(AfrecError::shape(p.data.len(), format!("{:?} for `{}`", e.shape, p.name)));
            }
            let start = e.offset as usize;
            let end = start + 8 * p.data.len();
            let raw = data.get(start..end).ok_or_else(|| bad(&format!("array `{}` out of bounds", p.name)))?;
            for (v, chunk) in p.data.iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        drop(params);
        Ok(Self { model, epoch: header.epoch, rng: header.rng, train_config: header.train })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| AfrecError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synthetic_categories, synthetic_schema};
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = Model::init(ModelConfig::micro(), synthetic_schema(), synthetic_categories(), &mut rng).unwrap();
        model.proj.ensure((0, 2), &mut rng);
        model.proj.ensure((1, 3), &mut rng);
        Checkpoint { model, epoch: 4, rng: RngState::of(&rng), train_config: Some(TrainConfig::default()) }
    }

    #[test]
    fn round_trip_is_byte_stable() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn generator_state_restores() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let _: u64 = rng.random();
        let state = RngState::of(&rng);
        let mut restored = state.restore().unwrap();
        assert_eq!(rng.random::<u64>(), restored.random::<u64>());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(AfrecError::Checkpoint(_))));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }

    #[test]
    fn fingerprint_depends_on_schema() {
        let a = schema_fingerprint(&synthetic_schema(), &synthetic_categories());
        let cats = CategorySet::new(vec!["x".into(), "y".into()]).unwrap();
        assert_ne!(a, schema_fingerprint(&synthetic_schema(), &cats));
        assert_eq!(a.len(), 64);
    }
}
