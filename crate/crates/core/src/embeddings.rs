//! Dense vectors, inner-product scoring, the `.wemb` store format and
//! embedding providers.
//!
//! # `.wemb` layout
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic   [u8; 4]   "WEMB"
//! version u16       1
//! flags   u16       bit 0: vectors are pre-normalized
//! dim     u32
//! count   u64
//! count × { id_len u16, id [u8; id_len] (UTF-8), values [f32; dim] }
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::kb::Chunk;

pub const WEMB_MAGIC: [u8; 4] = *b"WEMB";
pub const WEMB_VERSION: u16 = 1;
pub const FLAG_NORMALIZED: u16 = 1;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("vector contains a non-finite value at position {position}")]
    NonFinite { position: usize },
    #[error("cannot normalize a zero vector")]
    ZeroNorm,
    #[error("duplicate embedding id {0:?}")]
    DuplicateId(String),
    #[error("no embedding for id {0:?}")]
    NotFound(String),
    #[error("id {0:?} is longer than 65535 bytes")]
    IdTooLong(String),
    #[error("bad magic bytes {0:?}, expected \"WEMB\"")]
    BadMagic([u8; 4]),
    #[error("unsupported .wemb version {0}")]
    UnsupportedVersion(u16),
    #[error("file truncated in header")]
    TruncatedHeader,
    #[error("file truncated in record {index}")]
    Truncated { index: u64 },
    #[error("record {index}: id is not valid UTF-8")]
    InvalidId { index: u64 },
    #[error("record {index}: {source}")]
    Record {
        index: u64,
        #[source]
        source: Box<EmbeddingError>,
    },
    #[error("trailing bytes after {count} records")]
    TrailingBytes { count: u64 },
    #[error("{0}")]
    Provider(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A finite, fixed-dimension `f32` vector.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::ZeroDim);
        }
        if let Some(position) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite { position });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f32 {
        dot(&self.0, &self.0).sqrt()
    }
}

impl fmt::Debug for EmbeddingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("EmbeddingVector").field(&self.0).finish()
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = EmbeddingError;

    fn try_from(values: Vec<f32>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

impl AsRef<[f32]> for EmbeddingVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// Unchecked dot product. Callers guarantee equal lengths.
///
/// Accumulation order is fixed (eight interleaved lanes, then a sequential
/// tail) so every caller computing the same pair gets bit-identical scores.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f32; 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let tail_a = chunks_a.remainder();
    let tail_b = chunks_b.remainder();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for i in 0..8 {
            lanes[i] += ca[i] * cb[i];
        }
    }
    let mut sum = ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
    for (x, y) in tail_a.iter().zip(tail_b) {
        sum += x * y;
    }
    sum
}

pub fn inner_product(a: &[f32], b: &[f32]) -> Result<f32, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(dot(a, b))
}

pub fn normalize(v: &EmbeddingVector) -> Result<EmbeddingVector, EmbeddingError> {
    let norm = v.norm();
    if norm == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    Ok(EmbeddingVector(v.0.iter().map(|x| x / norm).collect()))
}

fn normalize_in_place(values: &mut [f32]) {
    let norm = dot(values, values).sqrt();
    if norm > 0.0 {
        values.iter_mut().for_each(|x| *x /= norm);
    }
}

/// What an [`EmbeddingStore`] holds. Not persisted in `.wemb`; the loader
/// supplies it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoreKind {
    Title,
    ImageQuery,
    QuestionQuery,
    Chunk,
}

/// Id-keyed vectors of a single dimension, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    kind: StoreKind,
    normalized: bool,
    ids: Vec<String>,
    data: Vec<f32>,
    lookup: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize, kind: StoreKind) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        Ok(Self {
            dim,
            kind,
            normalized: false,
            ids: Vec::new(),
            data: Vec::new(),
            lookup: HashMap::new(),
        })
    }

    /// Marks the store as holding unit-norm vectors. Only recorded in the
    /// header flag; vectors are never rescaled here.
    pub fn with_normalized(mut self, normalized: bool) -> Self {
        self.normalized = normalized;
        self
    }

    pub fn insert(&mut self, id: impl Into<String>, values: &[f32]) -> Result<(), EmbeddingError> {
        let id = id.into();
        if values.len() != self.dim {
            return Err(EmbeddingError::DimMismatch {
                expected: self.dim,
                actual: values.len(),
            });
        }
        if let Some(position) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite { position });
        }
        if id.len() > u16::MAX as usize {
            return Err(EmbeddingError::IdTooLong(id));
        }
        if self.lookup.contains_key(&id) {
            return Err(EmbeddingError::DuplicateId(id));
        }
        self.lookup.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.data.extend_from_slice(values);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> StoreKind {
        self.kind
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.lookup.get(id).map(|&i| self.row(i))
    }

    pub fn vector(&self, id: &str) -> Result<EmbeddingVector, EmbeddingError> {
        self.get(id)
            .map(|v| EmbeddingVector(v.to_vec()))
            .ok_or_else(|| EmbeddingError::NotFound(id.to_string()))
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.ids
            .iter()
            .enumerate()
            .map(move |(i, id)| (id.as_str(), self.row(i)))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), EmbeddingError> {
        let flags = if self.normalized { FLAG_NORMALIZED } else { 0 };
        w.write_all(&WEMB_MAGIC)?;
        w.write_all(&WEMB_VERSION.to_le_bytes())?;
        w.write_all(&flags.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for (id, values) in self.iter() {
            w.write_all(&(id.len() as u16).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, kind: StoreKind) -> Result<Self, EmbeddingError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r, kind)
    }

    pub fn read_from<R: Read>(r: &mut R, kind: StoreKind) -> Result<Self, EmbeddingError> {
        let mut header = [0u8; 20];
        read_exact_or(r, &mut header, EmbeddingError::TruncatedHeader)?;
        let magic: [u8; 4] = header[0..4].try_into().unwrap();
        if magic != WEMB_MAGIC {
            return Err(EmbeddingError::BadMagic(magic));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != WEMB_VERSION {
            return Err(EmbeddingError::UnsupportedVersion(version));
        }
        let flags = u16::from_le_bytes([header[6], header[7]]);
        let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(header[12..20].try_into().unwrap());

        let mut store = Self::new(dim, kind)?.with_normalized(flags & FLAG_NORMALIZED != 0);
        let mut payload = vec![0u8; dim * 4];
        let mut values = vec![0f32; dim];
        for index in 0..count {
            let mut len = [0u8; 2];
            read_exact_or(r, &mut len, EmbeddingError::Truncated { index })?;
            let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
            read_exact_or(r, &mut id, EmbeddingError::Truncated { index })?;
            let id = String::from_utf8(id).map_err(|_| EmbeddingError::InvalidId { index })?;
            read_exact_or(r, &mut payload, EmbeddingError::Truncated { index })?;
            for (v, b) in values.iter_mut().zip(payload.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().unwrap());
            }
            store
                .insert(id, &values)
                .map_err(|e| EmbeddingError::Record {
                    index,
                    source: Box::new(e),
                })?;
        }
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(EmbeddingError::TrailingBytes { count });
        }
        Ok(store)
    }
}

fn read_exact_or<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    err: EmbeddingError,
) -> Result<(), EmbeddingError> {
    match r.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(err),
        Err(e) => Err(e.into()),
    }
}

/// Maps text (or stored ids) to vectors. Implementations must be
/// deterministic and callable from several threads.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;

    fn lookup(&self, id: &str) -> Result<EmbeddingVector, EmbeddingError> {
        Err(EmbeddingError::NotFound(id.to_string()))
    }

    /// Embedding of one knowledge-base chunk. Text providers embed the chunk
    /// text; store-backed providers look up [`chunk_key`].
    fn embed_chunk(&self, chunk: &Chunk) -> Result<EmbeddingVector, EmbeddingError> {
        self.embed_text(&chunk.text)
    }
}

/// Key under which precomputed chunk embeddings are stored: `"{doc_id}#{chunk_index}"`.
pub fn chunk_key(doc_id: &str, chunk_index: usize) -> String {
    format!("{doc_id}#{chunk_index}")
}

/// Deterministic stand-in encoder: every string maps to a unit vector drawn
/// from a normal distribution seeded by SHA-256 of `(seed, text)`.
#[derive(Debug, Clone)]
pub struct TestEmbedder {
    seed: u64,
    dim: usize,
}

impl TestEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim >= 2, "test embedder needs dim >= 2");
        Self { seed, dim }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn raw(&self, text: &str) -> Vec<f32> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        loop {
            let mut v: Vec<f32> = (0..self.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            if dot(&v, &v) > 0.0 {
                normalize_in_place(&mut v);
                return v;
            }
        }
    }
}

impl EmbeddingProvider for TestEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        Ok(EmbeddingVector(self.raw(text)))
    }
}

/// Serves precomputed vectors from an [`EmbeddingStore`]. Chunks resolve
/// through [`chunk_key`]; free text is unsupported.
#[derive(Debug, Clone)]
pub struct StoreProvider {
    store: EmbeddingStore,
}

impl StoreProvider {
    pub fn new(store: EmbeddingStore) -> Self {
        Self { store }
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }
}

impl EmbeddingProvider for StoreProvider {
    fn dim(&self) -> usize {
        self.store.dim()
    }

    fn embed_text(&self, _text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        Err(EmbeddingError::Provider(
            "store-backed provider cannot embed free text".into(),
        ))
    }

    fn lookup(&self, id: &str) -> Result<EmbeddingVector, EmbeddingError> {
        self.store.vector(id)
    }

    fn embed_chunk(&self, chunk: &Chunk) -> Result<EmbeddingVector, EmbeddingError> {
        self.lookup(&chunk_key(&chunk.doc_id, chunk.chunk_index))
    }
}

#[cfg(test)]
pub(crate) fn is_unit(v: &[f32]) -> bool {
    (dot(v, v).sqrt() - 1.0).abs() <= 1e-5
}
