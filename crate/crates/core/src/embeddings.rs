//! Sentence embedding providers.
//!
//! Two implementations sit behind [`EmbeddingProvider`]:
//!
//! - [`EmbeddingTable`]: precomputed vectors keyed by tweet id, loaded from
//!   an SEB1 file. Frozen; never reports gradients.
//! - [`ToyEncoder`]: a hashed bag-of-n-grams projection followed by `tanh`.
//!   Trainable when constructed with `trainable = true`.
//!
//! # SEB1 layout (little-endian, no padding)
//!
//! ```text
//! 0..4    b"SEB1"
//! 4..8    u32 dim
//! 8..16   u64 count
//! then `count` records:
//!         u16 key length, key bytes (UTF-8), dim x f32
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::compute::ParamBlock;
use crate::dataset::LabeledTweet;

pub const SEB1_MAGIC: &[u8; 4] = b"SEB1";
pub const TOY_ENCODER_MAGIC: &[u8; 4] = b"STE1";

/// Maximum number of whitespace tokens the toy encoder reads.
pub const MAX_TOKENS: usize = 128;

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("format error: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("format error: file truncated at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("format error: duplicate key `{0}`")]
    DuplicateKey(String),
    #[error("format error at byte offset {offset}: {message}")]
    Malformed { offset: u64, message: String },
    #[error("no embedding for key `{0}`")]
    MissingKey(String),
    #[error("vector for key `{key}` has length {found}, expected {expected}")]
    DimMismatch {
        key: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Source of sentence embeddings for the model.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;

    /// Returns the embedding of `tweet`, widened to double precision.
    fn embed(&self, tweet: &LabeledTweet) -> Result<Vec<f64>, EmbeddingError>;

    /// Whether [`EmbeddingProvider::backward`] accumulates parameter gradients.
    fn is_trainable(&self) -> bool {
        false
    }

    /// Accumulates parameter gradients for `tweet` given the gradient of the
    /// loss with respect to its embedding.
    fn backward(&mut self, _tweet: &LabeledTweet, _grad: &[f64]) {}

    fn param_blocks(&mut self) -> Vec<ParamBlock<'_>> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for block in self.param_blocks() {
            block.grads.fill(0.0);
        }
    }
}

/// Precomputed single-precision embeddings keyed by example id, in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: IndexMap<String, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            entries: IndexMap::new(),
        }
    }

    pub fn from_entries(
        dim: usize,
        entries: IndexMap<String, Vec<f32>>,
    ) -> Result<Self, EmbeddingError> {
        for (key, v) in &entries {
            check_vector(key, v, dim)?;
        }
        Ok(EmbeddingTable { dim, entries })
    }

    pub fn insert(
        &mut self,
        key: impl Into<String>,
        vector: Vec<f32>,
    ) -> Result<(), EmbeddingError> {
        let key = key.into();
        check_vector(&key, &vector, self.dim)?;
        if self.entries.contains_key(&key) {
            return Err(EmbeddingError::DuplicateKey(key));
        }
        self.entries.insert(key, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), EmbeddingError> {
        let dim = u32::try_from(self.dim)
            .map_err(|_| EmbeddingError::Argument(format!("dim {} exceeds u32", self.dim)))?;
        w.write_all(SEB1_MAGIC)?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for (key, values) in &self.entries {
            let len = u16::try_from(key.len()).map_err(|_| {
                EmbeddingError::Argument(format!("key of {} bytes exceeds u16", key.len()))
            })?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(key.as_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, EmbeddingError> {
        let mut r = CountingReader {
            inner: r,
            offset: 0,
        };
        let mut magic = [0u8; 4];
        r.fill(&mut magic)?;
        if &magic != SEB1_MAGIC {
            return Err(EmbeddingError::BadMagic(magic));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.fill(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.fill(&mut b8)?;
        let count = u64::from_le_bytes(b8);

        let mut entries = IndexMap::new();
        let mut b2 = [0u8; 2];
        for _ in 0..count {
            let record_start = r.offset;
            r.fill(&mut b2)?;
            let mut key = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.fill(&mut key)?;
            let key = String::from_utf8(key).map_err(|_| EmbeddingError::Malformed {
                offset: record_start,
                message: "key is not valid UTF-8".into(),
            })?;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.fill(&mut b4)?;
                let v = f32::from_le_bytes(b4);
                if !v.is_finite() {
                    return Err(EmbeddingError::Malformed {
                        offset: r.offset - 4,
                        message: format!("non-finite value in record `{key}`"),
                    });
                }
                values.push(v);
            }
            if entries.contains_key(&key) {
                return Err(EmbeddingError::DuplicateKey(key));
            }
            entries.insert(key, values);
        }
        let mut probe = [0u8; 1];
        if r.inner.read(&mut probe)? != 0 {
            return Err(EmbeddingError::Malformed {
                offset: r.offset,
                message: "trailing bytes after the last record".into(),
            });
        }
        Ok(EmbeddingTable { dim, entries })
    }
}

fn check_vector(key: &str, v: &[f32], dim: usize) -> Result<(), EmbeddingError> {
    if v.len() != dim {
        return Err(EmbeddingError::DimMismatch {
            key: key.to_string(),
            expected: dim,
            found: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EmbeddingError::Argument(format!(
            "non-finite value in `{key}`"
        )));
    }
    Ok(())
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<(), EmbeddingError> {
        let mut done = 0;
        while done < buf.len() {
            match self.inner.read(&mut buf[done..]) {
                Ok(0) => {
                    return Err(EmbeddingError::Truncated {
                        offset: self.offset + done as u64,
                    })
                }
                Ok(k) => done += k,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }
}

pub fn load_embedding_table(path: impl AsRef<Path>) -> Result<EmbeddingTable, EmbeddingError> {
    EmbeddingTable::read_from(BufReader::new(File::open(path)?))
}

pub fn save_embedding_table(
    table: &EmbeddingTable,
    path: impl AsRef<Path>,
) -> Result<(), EmbeddingError> {
    table.write_to(BufWriter::new(File::create(path)?))
}

impl EmbeddingProvider for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tweet: &LabeledTweet) -> Result<Vec<f64>, EmbeddingError> {
        self.get(&tweet.id)
            .map(|v| v.iter().map(|&x| f64::from(x)).collect())
            .ok_or_else(|| EmbeddingError::MissingKey(tweet.id.clone()))
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Hashed bag-of-n-grams encoder: `tanh(projectionᵀ · features(text))`.
///
/// Features are the L2-normalized bucket counts of the first [`MAX_TOKENS`]
/// whitespace tokens and of the adjacent bigrams among them. A bigram is
/// hashed as the two tokens joined by a single space.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    vocab_size: usize,
    dim: usize,
    trainable: bool,
    /// `vocab_size x dim`, row-major.
    projection: Vec<f64>,
    grad: Vec<f64>,
}

impl ToyEncoder {
    /// Projection entries are drawn from U(-√3, √3) (unit variance), seeded.
    pub fn new(
        vocab_size: usize,
        dim: usize,
        seed: u64,
        trainable: bool,
    ) -> Result<Self, EmbeddingError> {
        if vocab_size < 2 || dim == 0 {
            return Err(EmbeddingError::Argument(format!(
                "toy encoder needs vocab_size >= 2 and dim >= 1 (got {vocab_size}, {dim})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = 3f64.sqrt();
        let projection = (0..vocab_size * dim)
            .map(|_| rng.random_range(-a..a))
            .collect();
        Ok(ToyEncoder {
            vocab_size,
            dim,
            trainable,
            projection,
            grad: vec![0.0; vocab_size * dim],
        })
    }

    pub fn from_projection(
        vocab_size: usize,
        dim: usize,
        projection: Vec<f64>,
        trainable: bool,
    ) -> Result<Self, EmbeddingError> {
        if vocab_size < 2 || dim == 0 || projection.len() != vocab_size * dim {
            return Err(EmbeddingError::Argument(
                "inconsistent toy encoder shape".into(),
            ));
        }
        if projection.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::Argument(
                "non-finite projection entry".into(),
            ));
        }
        Ok(ToyEncoder {
            vocab_size,
            dim,
            trainable,
            grad: vec![0.0; projection.len()],
            projection,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn projection_mut(&mut self) -> &mut [f64] {
        &mut self.projection
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Sparse feature vector as (bucket, weight) pairs sorted by bucket.
    pub fn features(&self, text: &str) -> Vec<(usize, f64)> {
        let tokens: Vec<&str> = text.split_whitespace().take(MAX_TOKENS).collect();
        let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
        let bucket = |bytes: &[u8]| (fnv1a(bytes) % self.vocab_size as u64) as usize;
        for t in &tokens {
            *counts.entry(bucket(t.as_bytes())).or_default() += 1.0;
        }
        for pair in tokens.windows(2) {
            let joined = format!("{} {}", pair[0], pair[1]);
            *counts.entry(bucket(joined.as_bytes())).or_default() += 1.0;
        }
        let norm = counts.values().map(|c| c * c).sum::<f64>().sqrt();
        counts.into_iter().map(|(b, c)| (b, c / norm)).collect()
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let mut pre = vec![0.0; self.dim];
        for (b, f) in self.features(text) {
            let row = &self.projection[b * self.dim..(b + 1) * self.dim];
            for (p, w) in pre.iter_mut().zip(row) {
                *p += f * w;
            }
        }
        pre.into_iter().map(f64::tanh).collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(TOY_ENCODER_MAGIC)?;
        w.write_all(&(self.vocab_size as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&[u8::from(self.trainable)])?;
        for v in &self.projection {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, EmbeddingError> {
        let mut r = CountingReader {
            inner: r,
            offset: 0,
        };
        let mut magic = [0u8; 4];
        r.fill(&mut magic)?;
        if &magic != TOY_ENCODER_MAGIC {
            return Err(EmbeddingError::BadMagic(magic));
        }
        let mut b4 = [0u8; 4];
        r.fill(&mut b4)?;
        let vocab = u32::from_le_bytes(b4) as usize;
        r.fill(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        let mut flag = [0u8; 1];
        r.fill(&mut flag)?;
        let mut b8 = [0u8; 8];
        let mut projection = Vec::with_capacity(vocab * dim);
        for _ in 0..vocab * dim {
            r.fill(&mut b8)?;
            projection.push(f64::from_le_bytes(b8));
        }
        ToyEncoder::from_projection(vocab, dim, projection, flag[0] != 0)
    }
}

impl EmbeddingProvider for ToyEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tweet: &LabeledTweet) -> Result<Vec<f64>, EmbeddingError> {
        Ok(self.encode(&tweet.text))
    }

    fn is_trainable(&self) -> bool {
        self.trainable
    }

    fn backward(&mut self, tweet: &LabeledTweet, grad: &[f64]) {
        if !self.trainable {
            return;
        }
        let out = self.encode(&tweet.text);
        let pre_grad: Vec<f64> = out
            .iter()
            .zip(grad)
            .map(|(y, g)| g * (1.0 - y * y))
            .collect();
        for (b, f) in self.features(&tweet.text) {
            let row = &mut self.grad[b * self.dim..(b + 1) * self.dim];
            for (acc, g) in row.iter_mut().zip(&pre_grad) {
                *acc += f * g;
            }
        }
    }

    fn param_blocks(&mut self) -> Vec<ParamBlock<'_>> {
        if !self.trainable {
            return Vec::new();
        }
        vec![ParamBlock {
            values: &mut self.projection,
            grads: &mut self.grad,
        }]
    }
}
