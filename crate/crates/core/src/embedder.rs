//! Batch-level feature extraction.
//!
//! [`GqaEncoder`] is a small deterministic transformer encoder built on
//! grouped-query attention. It stands in for a large pretrained model so that
//! the rest of the pipeline (memory layer, heads, training) can run end to end
//! without external weights. Features produced elsewhere enter through
//! [`import_embeddings`].

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use xxhash_rust::xxh3::{xxh3_64, xxh3_64_with_seed};

use crate::error::{Error, Result};
use crate::linalg::{softmax, Matrix};

/// A batch-level feature vector. Entries are always finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "embedding entry {pos} is {}",
                values[pos]
            )));
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Whitespace tokenizer with a hashing-trick vocabulary.
///
/// Tokens are case-folded and hashed with XXH3-64, then reduced modulo
/// `2^vocab_bits`. `vocab_bits` is clamped to `[8, 24]`.
pub fn tokenize(text: &str, vocab_bits: u32) -> Vec<u32> {
    let bits = vocab_bits.clamp(8, 24);
    let mask = (1u64 << bits) - 1;
    text.split_whitespace()
        .map(|tok| (xxh3_64(tok.to_lowercase().as_bytes()) & mask) as u32)
        .collect()
}

/// Fingerprint of the empty token sequence (XXH3-64 of zero bytes).
pub const EMPTY_FINGERPRINT: u64 = 0x2D06_8005_38D3_94C2;

/// Order-sensitive 64-bit key of a token sequence: XXH3-64 over the
/// little-endian bytes of the IDs.
pub fn fingerprint(batch: &[u32]) -> u64 {
    let bytes: Vec<u8> = batch.iter().flat_map(|t| t.to_le_bytes()).collect();
    xxh3_64(&bytes)
}

/// Content key for a precomputed vector (XXH3-64 over its f64 LE bytes).
pub fn fingerprint_vector(values: &[f64]) -> u64 {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    xxh3_64(&bytes)
}

/// Softmax weights and output of grouped-query attention.
pub struct AttentionOutput {
    pub output: Matrix,
    /// One `s × s` weight matrix per key/value group.
    pub weights: Vec<Matrix>,
}

/// Grouped-query attention.
///
/// `keys` and `values` are `s × d_k` and are split column-wise into `groups`
/// blocks of width `d_k / groups`. Every block attends with the same reduced
/// query `query` (`s × d_k/groups`), scaled by `1/sqrt(d_k/groups)`. The block
/// outputs are concatenated back into an `s × d_k` matrix.
pub fn gqa_attention(query: &Matrix, keys: &Matrix, values: &Matrix, groups: usize) -> Result<Matrix> {
    gqa_attention_with_weights(query, keys, values, groups).map(|a| a.output)
}

pub fn gqa_attention_with_weights(
    query: &Matrix,
    keys: &Matrix,
    values: &Matrix,
    groups: usize,
) -> Result<AttentionOutput> {
    let s = query.rows();
    let d_k = keys.cols();
    if groups == 0 || !d_k.is_multiple_of(groups) {
        return Err(Error::Shape(format!("{groups} groups do not divide d_k = {d_k}")));
    }
    let width = d_k / groups;
    if keys.rows() != s || values.rows() != s || values.cols() != d_k || query.cols() != width {
        return Err(Error::Shape(format!(
            "query {}x{}, keys {}x{}, values {}x{} with {groups} groups",
            query.rows(),
            query.cols(),
            keys.rows(),
            keys.cols(),
            values.rows(),
            values.cols()
        )));
    }
    let scale = 1.0 / (width as f64).sqrt();
    let mut output = Matrix::zeros(s, d_k);
    let mut weights = Vec::with_capacity(groups);
    for g in 0..groups {
        let k_g = keys.column_block(g * width, width);
        let v_g = values.column_block(g * width, width);
        let mut scores = query.matmul_t(&k_g)?;
        for r in 0..s {
            let row = scores.row_mut(r);
            row.iter_mut().for_each(|x| *x *= scale);
            let p = softmax(row);
            row.copy_from_slice(&p);
        }
        output.set_column_block(g * width, &scores.matmul(&v_g)?);
        weights.push(scores);
    }
    Ok(AttentionOutput { output, weights })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GqaConfig {
    /// Model width (`d_k`); also the embedding dimension.
    pub dim: usize,
    /// Key/value head count.
    pub heads: usize,
    /// Number of key/value heads that share one query head.
    pub groups: usize,
    pub layers: usize,
    /// Longest token sequence per batch; longer batches are truncated.
    pub seq_cap: usize,
    pub seed: u64,
}

impl Default for GqaConfig {
    fn default() -> Self {
        GqaConfig {
            dim: 64,
            heads: 8,
            groups: 2,
            layers: 2,
            seq_cap: 256,
            seed: 0,
        }
    }
}

impl GqaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.groups == 0 || self.layers == 0 || self.seq_cap == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if !self.heads.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "groups ({}) must divide heads ({})",
                self.groups, self.heads
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide dim ({})",
                self.heads, self.dim
            )));
        }
        Ok(())
    }

    fn head_width(&self) -> usize {
        self.dim / self.heads
    }

    fn query_width(&self) -> usize {
        (self.heads / self.groups) * self.head_width()
    }
}

struct EncoderLayer {
    /// `(dim/groups) × dim`
    w_query: Matrix,
    w_key: Matrix,
    w_value: Matrix,
    w_out: Matrix,
    ff_in: Matrix,
    ff_in_bias: Vec<f64>,
    ff_out: Matrix,
    ff_out_bias: Vec<f64>,
}

/// Deterministic toy encoder: hashed token embeddings plus sinusoidal
/// positions, `layers` pre-norm blocks of grouped-query attention and a
/// ReLU feed-forward network (both residual), then mean-pooling over positions.
///
/// Parameters are fixed at construction, so `embed_batch` can run from many
/// threads at once.
pub struct GqaEncoder {
    config: GqaConfig,
    layers: Vec<EncoderLayer>,
    truncations: AtomicUsize,
}

fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::uniform(rows, cols, 1.0 / (cols as f64).sqrt(), rng)
}

fn uniform_bias(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..=bound)).collect()
}

fn rms_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

impl GqaEncoder {
    pub fn new(config: GqaConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.dim;
        let ff = 2 * d;
        let layers = (0..config.layers)
            .map(|_| EncoderLayer {
                w_query: uniform_init(&mut rng, config.query_width(), d),
                w_key: uniform_init(&mut rng, d, d),
                w_value: uniform_init(&mut rng, d, d),
                w_out: uniform_init(&mut rng, d, d),
                ff_in: uniform_init(&mut rng, ff, d),
                ff_in_bias: uniform_bias(&mut rng, ff, d),
                ff_out: uniform_init(&mut rng, d, ff),
                ff_out_bias: uniform_bias(&mut rng, d, ff),
            })
            .collect();
        Ok(GqaEncoder {
            config,
            layers,
            truncations: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &GqaConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Number of batches truncated to `seq_cap` so far.
    pub fn truncations(&self) -> usize {
        self.truncations.load(Ordering::Relaxed)
    }

    fn token_row(&self, token: u32, position: usize, out: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(xxh3_64_with_seed(&token.to_le_bytes(), self.config.seed));
        let d = out.len();
        for (i, v) in out.iter_mut().enumerate() {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = position as f64 * freq;
            let pos = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            *v = rng.gen_range(-1.0..=1.0) + pos;
        }
    }

    fn attention(&self, layer: &EncoderLayer, x: &Matrix) -> Result<Matrix> {
        let q = x.matmul_t(&layer.w_query)?;
        let k = x.matmul_t(&layer.w_key)?;
        let v = x.matmul_t(&layer.w_value)?;
        let hw = self.config.head_width();
        let kv_width = self.config.groups * hw;
        let mut out = Matrix::zeros(x.rows(), self.config.dim);
        for qh in 0..self.config.heads / self.config.groups {
            let q_h = q.column_block(qh * hw, hw);
            let k_h = k.column_block(qh * kv_width, kv_width);
            let v_h = v.column_block(qh * kv_width, kv_width);
            let o = gqa_attention(&q_h, &k_h, &v_h, self.config.groups)?;
            out.set_column_block(qh * kv_width, &o);
        }
        out.matmul_t(&layer.w_out)
    }

    fn feed_forward(&self, layer: &EncoderLayer, x: &Matrix) -> Result<Matrix> {
        let mut hidden = x.matmul_t(&layer.ff_in)?;
        for r in 0..hidden.rows() {
            for (h, b) in hidden.row_mut(r).iter_mut().zip(&layer.ff_in_bias) {
                *h = (*h + b).max(0.0);
            }
        }
        let mut out = hidden.matmul_t(&layer.ff_out)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&layer.ff_out_bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Embeds one batch of token IDs into a `dim`-long vector.
    pub fn embed_batch(&self, batch: &[u32]) -> Result<Embedding> {
        if batch.is_empty() {
            return Err(Error::Empty("token batch"));
        }
        let batch = if batch.len() > self.config.seq_cap {
            self.truncations.fetch_add(1, Ordering::Relaxed);
            log::warn!(
                "batch of {} tokens truncated to seq_cap {}",
                batch.len(),
                self.config.seq_cap
            );
            &batch[..self.config.seq_cap]
        } else {
            batch
        };
        let d = self.config.dim;
        let mut x = Matrix::zeros(batch.len(), d);
        for (pos, &tok) in batch.iter().enumerate() {
            self.token_row(tok, pos, x.row_mut(pos));
        }
        for layer in &self.layers {
            let attn = self.attention(layer, &rms_norm(&x))?;
            add_in_place(&mut x, &attn);
            let ff = self.feed_forward(layer, &rms_norm(&x))?;
            add_in_place(&mut x, &ff);
        }
        let mut pooled = vec![0.0; d];
        for r in 0..x.rows() {
            for (p, v) in pooled.iter_mut().zip(x.row(r)) {
                *p += v;
            }
        }
        let n = x.rows() as f64;
        pooled.iter_mut().for_each(|p| *p /= n);
        Embedding::new(pooled)
    }
}

fn add_in_place(x: &mut Matrix, delta: &Matrix) {
    for (a, b) in x.as_mut_slice().iter_mut().zip(delta.as_slice()) {
        *a += b;
    }
}

#[derive(Deserialize)]
struct EmbeddingRecord {
    user_id: String,
    batch_idx: usize,
    vector: Vec<f64>,
}

/// Per-user batch embeddings read from embedding-JSONL, ordered by `batch_idx`.
#[derive(Clone, Debug, Default)]
pub struct ImportedEmbeddings {
    pub dim: usize,
    pub users: BTreeMap<String, Vec<Embedding>>,
}

/// Reads embedding-JSONL (`user_id`, `batch_idx`, `vector` per line).
pub fn import_embeddings(path: &Path) -> Result<ImportedEmbeddings> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dim: Option<usize> = None;
    let mut staged: BTreeMap<String, BTreeMap<usize, Embedding>> = BTreeMap::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.vector.is_empty() {
            return Err(parse_err("empty vector".into()));
        }
        match dim {
            None => dim = Some(rec.vector.len()),
            Some(d) if d != rec.vector.len() => {
                return Err(parse_err(format!(
                    "mixed dimensions: expected {d}, got {}",
                    rec.vector.len()
                )))
            }
            Some(_) => {}
        }
        let emb = Embedding::new(rec.vector).map_err(|e| parse_err(e.to_string()))?;
        let batches = staged.entry(rec.user_id.clone()).or_default();
        if batches.insert(rec.batch_idx, emb).is_some() {
            return Err(parse_err(format!(
                "duplicate batch_idx {} for user {}",
                rec.batch_idx, rec.user_id
            )));
        }
    }
    Ok(ImportedEmbeddings {
        dim: dim.unwrap_or(0),
        users: staged
            .into_iter()
            .map(|(user, batches)| (user, batches.into_values().collect()))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::io::Write;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::uniform(rows, cols, 2.0, rng)
    }

    /// Plain scaled dot-product attention written out with explicit loops.
    fn dense_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Vec<Vec<f64>> {
        let s = q.rows();
        let d = q.cols();
        let mut out = vec![vec![0.0; v.cols()]; s];
        for i in 0..s {
            let mut scores = vec![0.0; s];
            for j in 0..s {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += q[(i, c)] * k[(j, c)];
                }
                scores[j] = acc / (d as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().map(|x| (x - m).exp()).sum();
            for j in 0..s {
                let w = (scores[j] - m).exp() / z;
                for c in 0..v.cols() {
                    out[i][c] += w * v[(j, c)];
                }
            }
        }
        out
    }

    #[test]
    fn tokenize_examples() {
        let ids = tokenize("Hello hello", 16);
        assert_eq!(ids.len(), 2);
        assert_eq!(ids[0], ids[1]);
        assert!(tokenize("", 16).is_empty());
        let ab = tokenize("a b", 16);
        let ba = tokenize("b a", 16);
        assert_eq!(ab, vec![ba[1], ba[0]]);
        assert!(tokenize("some words here", 8).iter().all(|&t| t < 256));
    }

    #[test]
    fn fingerprint_examples() {
        assert_eq!(fingerprint(&[1, 2]), fingerprint(&[1, 2]));
        assert_ne!(fingerprint(&[1, 2]), fingerprint(&[2, 1]));
        assert_eq!(fingerprint(&[]), EMPTY_FINGERPRINT);
        assert_eq!(xxh3_64(b""), EMPTY_FINGERPRINT);
    }

    #[test]
    fn single_position_returns_value_row() {
        let q = Matrix::from_rows(&[vec![0.3, -0.7]]).unwrap();
        let k = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let v = Matrix::from_rows(&[vec![5.0, -6.0, 7.0, 8.5]]).unwrap();
        let out = gqa_attention(&q, &k, &v, 2).unwrap();
        assert_eq!(out.row(0), v.row(0));
    }

    #[test]
    fn zero_query_averages_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (s, dk, g) = (5, 8, 4);
        let q = Matrix::zeros(s, dk / g);
        let k = random_matrix(&mut rng, s, dk);
        let v = random_matrix(&mut rng, s, dk);
        let out = gqa_attention(&q, &k, &v, g).unwrap();
        for c in 0..dk {
            let mean = (0..s).map(|r| v[(r, c)]).sum::<f64>() / s as f64;
            for r in 0..s {
                assert!((out[(r, c)] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_group_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let s = rng.gen_range(1..=8);
            let dk = rng.gen_range(1..=16);
            let q = random_matrix(&mut rng, s, dk);
            let k = random_matrix(&mut rng, s, dk);
            let v = random_matrix(&mut rng, s, dk);
            let got = gqa_attention(&q, &k, &v, 1).unwrap();
            let want = dense_attention(&q, &k, &v);
            for r in 0..s {
                for c in 0..dk {
                    assert!((got[(r, c)] - want[r][c]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let q = Matrix::zeros(2, 3);
        let k = Matrix::zeros(2, 6);
        assert!(gqa_attention(&q, &k, &k, 4).is_err());
        assert!(gqa_attention(&q, &k, &Matrix::zeros(3, 6), 2).is_err());
        assert!(gqa_attention(&q, &k, &k, 0).is_err());
        assert!(gqa_attention(&q, &k, &k, 2).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn softmax_rows_sum_to_one(seed in any::<u64>(), s in 1usize..8, width in 1usize..5, g in prop::sample::select(vec![1usize, 2, 4])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_matrix(&mut rng, s, width);
            let k = random_matrix(&mut rng, s, width * g);
            let v = random_matrix(&mut rng, s, width * g);
            let att = gqa_attention_with_weights(&q, &k, &v, g).unwrap();
            for w in &att.weights {
                for r in 0..s {
                    prop_assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn linear_in_values(seed in any::<u64>(), c in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_matrix(&mut rng, 4, 2);
            let k = random_matrix(&mut rng, 4, 4);
            let v = random_matrix(&mut rng, 4, 4);
            let mut scaled = v.clone();
            scaled.as_mut_slice().iter_mut().for_each(|x| *x *= c);
            let a = gqa_attention(&q, &k, &v, 2).unwrap();
            let b = gqa_attention(&q, &k, &scaled, 2).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x * c - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn encoder_is_deterministic_and_sized() {
        for dim in [16, 64] {
            let cfg = GqaConfig {
                dim,
                heads: 4,
                groups: 2,
                ..Default::default()
            };
            let enc = GqaEncoder::new(cfg.clone()).unwrap();
            let batch = tokenize("the quick brown fox jumps", 16);
            let a = enc.embed_batch(&batch).unwrap();
            let b = GqaEncoder::new(cfg).unwrap().embed_batch(&batch).unwrap();
            assert_eq!(a.dim(), dim);
            assert_eq!(a, b);
            assert!(a.as_slice().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn encoder_separates_batches() {
        let enc = GqaEncoder::new(GqaConfig::default()).unwrap();
        let a = enc.embed_batch(&tokenize("i love long walks", 16)).unwrap();
        let b = enc.embed_batch(&tokenize("quarterly tax filings", 16)).unwrap();
        assert_ne!(a, b);
        // order-sensitive through positional encoding
        let c = enc.embed_batch(&tokenize("walks long love i", 16)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn encoder_rejects_empty_and_truncates() {
        let enc = GqaEncoder::new(GqaConfig {
            seq_cap: 4,
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(enc.embed_batch(&[]), Err(Error::Empty(_))));
        let long = enc.embed_batch(&[1, 2, 3, 4, 5, 6]).unwrap();
        let short = enc.embed_batch(&[1, 2, 3, 4]).unwrap();
        assert_eq!(long, short);
        assert_eq!(enc.truncations(), 1);
    }

    #[test]
    fn config_validation() {
        let bad = GqaConfig {
            heads: 6,
            groups: 4,
            ..Default::default()
        };
        assert!(GqaEncoder::new(bad).is_err());
        let bad = GqaConfig {
            dim: 30,
            heads: 4,
            groups: 2,
            ..Default::default()
        };
        assert!(GqaEncoder::new(bad).is_err());
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn import_orders_batches() {
        let f = write_lines(&[
            r#"{"user_id":"u","batch_idx":1,"vector":[0.0,1.0]}"#,
            r#"{"user_id":"u","batch_idx":0,"vector":[1.0,0.0]}"#,
        ]);
        let imported = import_embeddings(f.path()).unwrap();
        assert_eq!(imported.dim, 2);
        let u = &imported.users["u"];
        assert_eq!(u.len(), 2);
        assert_eq!(u[0].as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn import_rejects_non_finite() {
        let f = write_lines(&[
            r#"{"user_id":"u","batch_idx":0,"vector":[1.0]}"#,
            r#"{"user_id":"u","batch_idx":1,"vector":[NaN]}"#,
        ]);
        let err = import_embeddings(f.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let f = write_lines(&[r#"{"user_id":"u","batch_idx":0,"vector":[1e999]}"#]);
        assert!(matches!(import_embeddings(f.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn import_rejects_mixed_dims() {
        let f = write_lines(&[
            r#"{"user_id":"a","batch_idx":0,"vector":[1,2,3,4]}"#,
            r#"{"user_id":"b","batch_idx":0,"vector":[1,2,3,4,5]}"#,
        ]);
        let err = import_embeddings(f.path()).unwrap_err();
        assert!(err.to_string().contains("mixed dimensions"), "{err}");
    }
}
