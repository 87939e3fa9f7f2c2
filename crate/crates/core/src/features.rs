//! Connects batch inputs to the memory layer and a pluggable extractor.

use crate::dataset::{MbtiLabel, UserSample};
use crate::embedder::{fingerprint, fingerprint_vector, Embedding, GqaEncoder};
use crate::error::{Error, Result};
use crate::memory::{CacheStats, MemoryStore, Outcome};

/// What a batch is made of before feature extraction.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Tokens(Vec<u32>),
    /// A vector produced outside this process (e.g. by a large model).
    Vector(Embedding),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchInput {
    /// Content fingerprint; the exact-reuse cache key.
    pub key: u64,
    pub payload: Payload,
}

impl BatchInput {
    pub fn tokens(ids: Vec<u32>) -> Self {
        BatchInput {
            key: fingerprint(&ids),
            payload: Payload::Tokens(ids),
        }
    }

    pub fn vector(v: Embedding) -> Self {
        BatchInput {
            key: fingerprint_vector(v.as_slice()),
            payload: Payload::Vector(v),
        }
    }
}

/// A labelled user whose batches still need (possibly cached) extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct UserBatches {
    pub user_id: String,
    pub label: MbtiLabel,
    pub batches: Vec<BatchInput>,
}

impl From<&UserSample> for UserBatches {
    fn from(s: &UserSample) -> Self {
        UserBatches {
            user_id: s.user_id.clone(),
            label: s.label,
            batches: s.batches.iter().cloned().map(BatchInput::tokens).collect(),
        }
    }
}

/// Produces the embedding of one batch.
pub trait FeatureExtractor: Sync {
    fn dim(&self) -> usize;
    fn extract(&self, batch: &BatchInput) -> Result<Embedding>;
}

/// Token batches go through the encoder; vector payloads pass through.
impl FeatureExtractor for GqaEncoder {
    fn dim(&self) -> usize {
        GqaEncoder::dim(self)
    }

    fn extract(&self, batch: &BatchInput) -> Result<Embedding> {
        match &batch.payload {
            Payload::Tokens(ids) => self.embed_batch(ids),
            Payload::Vector(v) => Ok(v.clone()),
        }
    }
}

/// Extractor for inputs that are already vectors.
#[derive(Clone, Copy, Debug)]
pub struct Precomputed {
    pub dim: usize,
}

impl FeatureExtractor for Precomputed {
    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, batch: &BatchInput) -> Result<Embedding> {
        match &batch.payload {
            Payload::Vector(v) => Ok(v.clone()),
            Payload::Tokens(_) => Err(Error::Compute(
                "token batch given to a precomputed-vector source".into(),
            )),
        }
    }
}

/// Memory store plus the extractor that fills it on a miss.
pub struct FeatureCache<'a> {
    store: MemoryStore,
    extractor: &'a dyn FeatureExtractor,
    /// Offer vector payloads as similarity probes.
    use_probe: bool,
}

impl<'a> FeatureCache<'a> {
    pub fn new(store: MemoryStore, extractor: &'a dyn FeatureExtractor) -> Result<Self> {
        if store.dim() != extractor.dim() {
            return Err(Error::DimensionMismatch {
                expected: store.dim(),
                actual: extractor.dim(),
            });
        }
        Ok(FeatureCache {
            store,
            extractor,
            use_probe: true,
        })
    }

    pub fn with_probe(mut self, use_probe: bool) -> Self {
        self.use_probe = use_probe;
        self
    }

    pub fn dim(&self) -> usize {
        self.store.dim()
    }

    pub fn fetch(&mut self, batch: &BatchInput) -> Result<(Embedding, Outcome)> {
        let probe = match (&batch.payload, self.use_probe) {
            (Payload::Vector(v), true) => Some(v),
            _ => None,
        };
        let extractor = self.extractor;
        self.store
            .lookup_or_compute(batch.key, probe, || extractor.extract(batch))
    }

    pub fn fetch_user(&mut self, user: &UserBatches) -> Result<Vec<Embedding>> {
        if user.batches.is_empty() {
            return Err(Error::Empty("user batch list"));
        }
        user.batches
            .iter()
            .map(|b| self.fetch(b).map(|(e, _)| e))
            .collect()
    }

    pub fn stats(&self) -> CacheStats {
        self.store.stats()
    }

    pub fn store(&self) -> &MemoryStore {
        &self.store
    }

    pub fn into_store(self) -> MemoryStore {
        self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::GqaConfig;
    use crate::memory::MemoryConfig;

    #[test]
    fn second_pass_is_all_exact_hits() {
        let enc = GqaEncoder::new(GqaConfig {
            dim: 16,
            heads: 4,
            groups: 2,
            ..Default::default()
        })
        .unwrap();
        let store = MemoryStore::new(MemoryConfig::new(16)).unwrap();
        let mut cache = FeatureCache::new(store, &enc).unwrap();
        let batches: Vec<BatchInput> = (0..5u32).map(|i| BatchInput::tokens(vec![i, i + 1, i + 2])).collect();
        for b in &batches {
            assert_eq!(cache.fetch(b).unwrap().1, Outcome::Recompute);
        }
        for b in &batches {
            assert_eq!(cache.fetch(b).unwrap().1, Outcome::HitExact);
        }
        let s = cache.stats();
        assert_eq!((s.recomputes, s.hits_exact), (5, 5));
    }

    #[test]
    fn dimension_conflict_is_rejected() {
        let store = MemoryStore::new(MemoryConfig::new(8)).unwrap();
        assert!(FeatureCache::new(store, &Precomputed { dim: 4 }).is_err());
    }

    #[test]
    fn near_duplicate_vectors_reuse() {
        let store = MemoryStore::new(MemoryConfig {
            theta: 0.99,
            ..MemoryConfig::new(3)
        })
        .unwrap();
        let src = Precomputed { dim: 3 };
        let mut cache = FeatureCache::new(store, &src).unwrap();
        let a = BatchInput::vector(Embedding::new(vec![1.0, 2.0, 3.0]).unwrap());
        let b = BatchInput::vector(Embedding::new(vec![1.0, 2.0, 3.001]).unwrap());
        assert_eq!(cache.fetch(&a).unwrap().1, Outcome::Recompute);
        let (got, outcome) = cache.fetch(&b).unwrap();
        assert_eq!(outcome, Outcome::HitSimilar);
        assert_eq!(got.as_slice(), &[1.0, 2.0, 3.0]);
    }
}
