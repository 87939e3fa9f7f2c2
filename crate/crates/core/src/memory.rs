//! Dynamic memory layer: a capacity-bounded cache of batch embeddings.
//!
//! Entries are looked up first by an exact content fingerprint. When the
//! caller also supplies a probe vector, a second chance is given through a
//! sign-random-projection LSH index: the most cosine-similar stored vector in
//! the probe's bucket (and buckets within `probe_radius` bit flips) is reused
//! if its similarity reaches `theta`. Otherwise the embedding is recomputed
//! and inserted, evicting the least recently used entry when full.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::sync::RwLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::binio::{Decoder, Encoder};
use crate::embedder::Embedding;
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

pub const STORE_MAGIC: &[u8; 4] = b"PMEM";
pub const STORE_VERSION: u16 = 1;

/// Hash bits packed little-end first: bit `b` of the pattern is projection row `b`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitPattern(pub u64);

impl BitPattern {
    pub fn bit(self, b: usize) -> bool {
        (self.0 >> b) & 1 == 1
    }

    pub fn to_bits(self, len: usize) -> Vec<bool> {
        (0..len).map(|b| self.bit(b)).collect()
    }

    pub fn hamming(self, other: BitPattern) -> u32 {
        (self.0 ^ other.0).count_ones()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct EntryId(pub u64);

/// Random-hyperplane LSH over `dim`-long vectors.
#[derive(Clone, Debug)]
pub struct LshIndex {
    projection: Matrix,
    seed: u64,
    buckets: HashMap<BitPattern, BTreeSet<EntryId>>,
}

impl LshIndex {
    /// Draws a `bits × dim` standard-normal projection from `seed`.
    pub fn new(dim: usize, bits: usize, seed: u64) -> Result<Self> {
        if !(1..=64).contains(&bits) {
            return Err(Error::Config(format!("LSH bits must be in [1, 64], got {bits}")));
        }
        if dim == 0 {
            return Err(Error::Config("LSH dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..bits * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(LshIndex {
            projection: Matrix::from_vec(bits, dim, data)?,
            seed,
            buckets: HashMap::new(),
        })
    }

    /// Uses the given rows as hyperplanes.
    pub fn with_projection(projection: Matrix) -> Result<Self> {
        if !(1..=64).contains(&projection.rows()) || projection.cols() == 0 {
            return Err(Error::Shape(format!(
                "projection must be 1..=64 rows of positive width, got {}x{}",
                projection.rows(),
                projection.cols()
            )));
        }
        Ok(LshIndex {
            projection,
            seed: 0,
            buckets: HashMap::new(),
        })
    }

    pub fn bits(&self) -> usize {
        self.projection.rows()
    }

    pub fn dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    /// Bit `b` is set iff `row_b · v ≥ 0`.
    pub fn hash(&self, v: &[f64]) -> Result<BitPattern> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: v.len(),
            });
        }
        let mut pattern = 0u64;
        for b in 0..self.bits() {
            if dot(self.projection.row(b), v) >= 0.0 {
                pattern |= 1 << b;
            }
        }
        Ok(BitPattern(pattern))
    }

    fn add(&mut self, pattern: BitPattern, id: EntryId) {
        self.buckets.entry(pattern).or_default().insert(id);
    }

    fn remove(&mut self, pattern: BitPattern, id: EntryId) {
        if let Some(set) = self.buckets.get_mut(&pattern) {
            set.remove(&id);
            if set.is_empty() {
                self.buckets.remove(&pattern);
            }
        }
    }

    /// Entry IDs in buckets within `radius` bit flips of `pattern`.
    pub fn candidates(&self, pattern: BitPattern, radius: usize) -> BTreeSet<EntryId> {
        let mut out = BTreeSet::new();
        if radius >= self.bits() || self.neighborhood_size(radius) > self.buckets.len() {
            for (p, ids) in &self.buckets {
                if p.hamming(pattern) as usize <= radius {
                    out.extend(ids);
                }
            }
        } else {
            self.visit_flips(pattern, 0, radius, &mut |p| {
                if let Some(ids) = self.buckets.get(&p) {
                    out.extend(ids);
                }
            });
        }
        out
    }

    fn neighborhood_size(&self, radius: usize) -> usize {
        let n = self.bits();
        let mut total = 0usize;
        let mut choose = 1usize;
        for k in 0..=radius.min(n) {
            total = total.saturating_add(choose);
            choose = choose.saturating_mul(n - k) / (k + 1);
        }
        total
    }

    fn visit_flips(&self, pattern: BitPattern, from: usize, budget: usize, f: &mut impl FnMut(BitPattern)) {
        f(pattern);
        if budget == 0 {
            return;
        }
        for b in from..self.bits() {
            self.visit_flips(BitPattern(pattern.0 ^ (1 << b)), b + 1, budget - 1, f);
        }
    }

    /// Number of non-empty buckets.
    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    pub fn bucket_of(&self, id: EntryId) -> Option<BitPattern> {
        self.buckets
            .iter()
            .find(|(_, ids)| ids.contains(&id))
            .map(|(p, _)| *p)
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either argument has zero norm; `value` is then 0.
    pub zero_norm: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Cosine> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let (sa, sb) = (max_abs(a), max_abs(b));
    if sa == 0.0 || sb == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            zero_norm: true,
        });
    }
    // rescale so that huge entries cannot overflow the dot products
    let a: Vec<f64> = a.iter().map(|x| x / sa).collect();
    let b: Vec<f64> = b.iter().map(|x| x / sb).collect();
    Ok(Cosine {
        value: (dot(&a, &b) / (norm(&a) * norm(&b))).clamp(-1.0, 1.0),
        zero_norm: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Outcome {
    HitExact,
    HitSimilar,
    Recompute,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub hits_exact: u64,
    pub hits_similar: u64,
    /// Lookups that found nothing reusable and fell through to compute.
    pub misses: u64,
    pub evictions: u64,
    /// Successful computations inserted into the store.
    pub recomputes: u64,
}

impl CacheStats {
    pub fn lookups(&self) -> u64 {
        self.hits_exact + self.hits_similar + self.misses
    }

    pub fn hit_rate(&self) -> f64 {
        match self.lookups() {
            0 => 0.0,
            n => (self.hits_exact + self.hits_similar) as f64 / n as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryConfig {
    pub dim: usize,
    pub bits: usize,
    /// Maximum entries; `None` is unbounded.
    pub capacity: Option<usize>,
    pub theta: f64,
    pub probe_radius: usize,
    pub seed: u64,
}

impl MemoryConfig {
    pub fn new(dim: usize) -> Self {
        MemoryConfig {
            dim,
            bits: 16,
            capacity: None,
            theta: 0.98,
            probe_radius: 1,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.capacity == Some(0) {
            return Err(Error::Config("capacity must be at least 1".into()));
        }
        if self.theta.is_nan() {
            return Err(Error::Config("theta must be a number".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Entry {
    key: u64,
    vector: Embedding,
    stamp: u64,
    bucket: BitPattern,
}

/// Result of a nearest-neighbour probe.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor<'a> {
    pub id: EntryId,
    pub key: u64,
    pub score: f64,
    pub embedding: &'a Embedding,
}

/// LSH-indexed LRU store of embeddings.
#[derive(Clone, Debug)]
pub struct MemoryStore {
    config: MemoryConfig,
    index: LshIndex,
    entries: HashMap<EntryId, Entry>,
    by_key: HashMap<u64, EntryId>,
    /// stamp -> entry, oldest first
    recency: BTreeMap<u64, EntryId>,
    clock: u64,
    next_id: u64,
    stats: CacheStats,
}

impl MemoryStore {
    pub fn new(config: MemoryConfig) -> Result<Self> {
        config.validate()?;
        let index = LshIndex::new(config.dim, config.bits, config.seed)?;
        Ok(Self::with_index(config, index))
    }

    fn with_index(config: MemoryConfig, index: LshIndex) -> Self {
        MemoryStore {
            config,
            index,
            entries: HashMap::new(),
            by_key: HashMap::new(),
            recency: BTreeMap::new(),
            clock: 0,
            next_id: 0,
            stats: CacheStats::default(),
        }
    }

    /// Store whose LSH index uses a caller-chosen projection.
    pub fn with_projection(config: MemoryConfig, projection: Matrix) -> Result<Self> {
        config.validate()?;
        let index = LshIndex::with_projection(projection)?;
        if index.dim() != config.dim {
            return Err(Error::DimensionMismatch {
                expected: config.dim,
                actual: index.dim(),
            });
        }
        Ok(Self::with_index(config, index))
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn theta(&self) -> f64 {
        self.config.theta
    }

    pub fn set_theta(&mut self, theta: f64) {
        self.config.theta = theta;
    }

    pub fn set_probe_radius(&mut self, radius: usize) {
        self.config.probe_radius = radius;
    }

    pub fn index(&self) -> &LshIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains_key(&self, key: u64) -> bool {
        self.by_key.contains_key(&key)
    }

    pub fn get(&self, key: u64) -> Option<&Embedding> {
        self.by_key.get(&key).map(|id| &self.entries[id].vector)
    }

    pub fn key_of(&self, id: EntryId) -> Option<u64> {
        self.entries.get(&id).map(|e| e.key)
    }

    /// Keys ordered from least to most recently used.
    pub fn keys_by_recency(&self) -> Vec<u64> {
        self.recency.values().map(|id| self.entries[id].key).collect()
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    fn check_dim(&self, v: &Embedding) -> Result<()> {
        if v.dim() != self.config.dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.dim,
                actual: v.dim(),
            });
        }
        Ok(())
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    fn touch(&mut self, id: EntryId) {
        let stamp = self.tick();
        let entry = self.entries.get_mut(&id).expect("live entry");
        self.recency.remove(&entry.stamp);
        entry.stamp = stamp;
        self.recency.insert(stamp, id);
    }

    /// Highest-cosine entry among the probe's bucket and its neighbours within
    /// `probe_radius` flips. Ties go to the lowest entry ID. Does not touch
    /// recency.
    pub fn query_nearest(&self, probe: &Embedding) -> Result<Option<Neighbor<'_>>> {
        self.check_dim(probe)?;
        let pattern = self.index.hash(probe.as_slice())?;
        let mut best: Option<Neighbor<'_>> = None;
        for id in self.index.candidates(pattern, self.config.probe_radius) {
            let entry = &self.entries[&id];
            let score = cosine_similarity(probe.as_slice(), entry.vector.as_slice())?.value;
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(Neighbor {
                    id,
                    key: entry.key,
                    score,
                    embedding: &entry.vector,
                });
            }
        }
        Ok(best)
    }

    /// Returns the embedding for `key`, reusing a stored one when possible.
    ///
    /// Order of checks: exact key, then (if `probe` is given) the nearest
    /// stored vector with similarity ≥ θ, otherwise `compute` runs exactly
    /// once and its result is inserted. A failing `compute` leaves the
    /// entries untouched.
    pub fn lookup_or_compute<F>(&mut self, key: u64, probe: Option<&Embedding>, compute: F) -> Result<(Embedding, Outcome)>
    where
        F: FnOnce() -> Result<Embedding>,
    {
        if let Some(p) = probe {
            self.check_dim(p)?;
        }
        if let Some(&id) = self.by_key.get(&key) {
            self.touch(id);
            self.stats.hits_exact += 1;
            return Ok((self.entries[&id].vector.clone(), Outcome::HitExact));
        }
        if let Some(p) = probe {
            let theta = self.config.theta;
            let found = self
                .query_nearest(p)?
                .filter(|n| n.score >= theta)
                .map(|n| (n.id, n.embedding.clone()));
            if let Some((id, vector)) = found {
                self.touch(id);
                self.stats.hits_similar += 1;
                return Ok((vector, Outcome::HitSimilar));
            }
        }
        self.stats.misses += 1;
        let vector = compute()?;
        self.check_dim(&vector)?;
        self.insert(key, vector.clone())?;
        self.stats.recomputes += 1;
        Ok((vector, Outcome::Recompute))
    }

    /// Inserts `v` under `key`, evicting the least recently used entry when
    /// the store is full. Re-inserting an existing key replaces its vector and
    /// refreshes it without eviction.
    pub fn insert(&mut self, key: u64, v: Embedding) -> Result<Option<EntryId>> {
        self.check_dim(&v)?;
        let bucket = self.index.hash(v.as_slice())?;
        if let Some(&id) = self.by_key.get(&key) {
            let old = self.entries[&id].bucket;
            self.index.remove(old, id);
            self.index.add(bucket, id);
            let entry = self.entries.get_mut(&id).expect("live entry");
            entry.vector = v;
            entry.bucket = bucket;
            self.touch(id);
            return Ok(None);
        }
        let mut evicted = None;
        if let Some(cap) = self.config.capacity {
            if self.entries.len() >= cap {
                evicted = self.evict_oldest();
            }
        }
        let id = EntryId(self.next_id);
        self.next_id += 1;
        let stamp = self.tick();
        self.entries.insert(
            id,
            Entry {
                key,
                vector: v,
                stamp,
                bucket,
            },
        );
        self.by_key.insert(key, id);
        self.recency.insert(stamp, id);
        self.index.add(bucket, id);
        Ok(evicted)
    }

    fn evict_oldest(&mut self) -> Option<EntryId> {
        let (_, id) = self.recency.pop_first()?;
        let entry = self.entries.remove(&id).expect("live entry");
        self.by_key.remove(&entry.key);
        self.index.remove(entry.bucket, id);
        self.stats.evictions += 1;
        Some(id)
    }

    /// Checks the structural invariants; used by tests.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if let Some(cap) = self.config.capacity {
            if self.entries.len() > cap {
                return Err(format!("{} entries exceed capacity {cap}", self.entries.len()));
            }
        }
        if self.recency.len() != self.entries.len() || self.by_key.len() != self.entries.len() {
            return Err("index sizes disagree".into());
        }
        let indexed: usize = self.index.buckets.values().map(BTreeSet::len).sum();
        if indexed != self.entries.len() {
            return Err(format!("{indexed} indexed ids for {} entries", self.entries.len()));
        }
        for (id, e) in &self.entries {
            let expected = self.index.hash(e.vector.as_slice()).map_err(|e| e.to_string())?;
            if e.bucket != expected || !self.index.buckets.get(&expected).is_some_and(|s| s.contains(id)) {
                return Err(format!("entry {id:?} is not in its hash bucket"));
            }
            if self.recency.get(&e.stamp) != Some(id) {
                return Err(format!("entry {id:?} stamp not tracked"));
            }
        }
        Ok(())
    }

    /// Writes the store; counters are not persisted.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut enc = Encoder::new(STORE_MAGIC, STORE_VERSION);
        enc.u32(self.config.dim as u32);
        enc.u16(self.index.bits() as u16);
        enc.u64(self.config.capacity.map_or(u64::MAX, |c| c as u64));
        enc.f64(self.config.theta);
        enc.u64(self.index.seed());
        enc.u64(self.entries.len() as u64);
        for id in self.recency.values() {
            let e = &self.entries[id];
            enc.u64(e.key);
            enc.u64(e.stamp);
            enc.f64s(e.vector.as_slice());
        }
        enc.finish(path)
    }

    /// Reads a store written by [`save`](Self::save). The LSH projection is
    /// regenerated from the stored seed, recency order is preserved and all
    /// counters start at zero. `probe_radius` is not persisted and defaults to 1.
    pub fn load(path: &Path) -> Result<Self> {
        let mut dec = Decoder::open(path, STORE_MAGIC, "memory store", STORE_VERSION)?;
        let dim = dec.u32()? as usize;
        let bits = dec.u16()? as usize;
        let capacity = match dec.u64()? {
            u64::MAX => None,
            c => Some(c as usize),
        };
        let theta = dec.f64()?;
        let seed = dec.u64()?;
        let count = dec.u64()?;
        let config = MemoryConfig {
            dim,
            bits,
            capacity,
            theta,
            probe_radius: 1,
            seed,
        };
        let mut store = MemoryStore::new(config).map_err(|e| dec.corrupt(e.to_string()))?;
        for _ in 0..count {
            let key = dec.u64()?;
            let stamp = dec.u64()?;
            let values = dec.f64s(dim)?;
            let vector = Embedding::new(values).map_err(|e| dec.corrupt(e.to_string()))?;
            if store.by_key.contains_key(&key) || stamp <= store.clock {
                return Err(dec.corrupt("duplicate key or unordered stamp"));
            }
            let bucket = store.index.hash(vector.as_slice())?;
            let id = EntryId(store.next_id);
            store.next_id += 1;
            store.clock = stamp;
            store.entries.insert(
                id,
                Entry {
                    key,
                    vector,
                    stamp,
                    bucket,
                },
            );
            store.by_key.insert(key, id);
            store.recency.insert(stamp, id);
            store.index.add(bucket, id);
        }
        dec.finish()?;
        Ok(store)
    }
}

/// Reader-writer wrapper: concurrent probes, exclusive mutation.
/// `compute` runs inside the exclusive section, so each key is inserted at
/// most once.
#[derive(Debug)]
pub struct SharedMemoryStore {
    inner: RwLock<MemoryStore>,
}

impl SharedMemoryStore {
    pub fn new(store: MemoryStore) -> Self {
        SharedMemoryStore {
            inner: RwLock::new(store),
        }
    }

    pub fn query_nearest(&self, probe: &Embedding) -> Result<Option<(EntryId, u64, f64, Embedding)>> {
        let guard = self.inner.read().expect("memory store lock poisoned");
        Ok(guard
            .query_nearest(probe)?
            .map(|n| (n.id, n.key, n.score, n.embedding.clone())))
    }

    pub fn lookup_or_compute<F>(&self, key: u64, probe: Option<&Embedding>, compute: F) -> Result<(Embedding, Outcome)>
    where
        F: FnOnce() -> Result<Embedding>,
    {
        self.inner
            .write()
            .expect("memory store lock poisoned")
            .lookup_or_compute(key, probe, compute)
    }

    pub fn stats(&self) -> CacheStats {
        self.inner.read().expect("memory store lock poisoned").stats()
    }

    pub fn into_inner(self) -> MemoryStore {
        self.inner.into_inner().expect("memory store lock poisoned")
    }
}
