//! Per-token embedding tables.
//!
//! A table keeps the vectors exactly as stored (`f32`, the on-disk
//! precision) together with an L2-normalized `f64` copy that is computed
//! once when the table is built. All distance computations use the
//! normalized copy.
//!
//! # Store format
//!
//! Little-endian binary:
//!
//! ```text
//! b"FSEMB1"  u32 dim  u32 sentence_count
//! repeat sentence_count times:
//!     u32 token_count  then token_count * dim f32 values
//! ```
//!
//! A sidecar text manifest (`<file>.manifest`, one `key=value` per line)
//! records the provenance and the digest of the corpus the file was built for.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::TaggedSentence;

pub const MAGIC: &[u8; 6] = b"FSEMB1";

/// Provenance string used by [`hash_featurize`].
pub const HASH_PROVENANCE: &str = "hash-featurizer";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not an embedding store (bad magic)")]
    BadMagic,
    #[error("embedding store is truncated: {0}")]
    Truncated(String),
    #[error("{0} trailing bytes after the last record")]
    TrailingData(usize),
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("hash featurizer needs dim >= 8, got {0}")]
    DimTooSmall(usize),
    #[error("sentence {sentence}: {len} values is not a multiple of dim {dim}")]
    Ragged {
        sentence: usize,
        len: usize,
        dim: usize,
    },
    #[error("sentence {sentence}, token {token}: non-finite component")]
    NonFinite { sentence: usize, token: usize },
    #[error("vector has a non-finite component")]
    NonFiniteVector,
    #[error("store has {found} sentences, corpus has {expected}")]
    SentenceCount { expected: usize, found: usize },
    #[error("sentence {sentence}: store has {found} tokens, corpus has {expected}")]
    Alignment {
        sentence: usize,
        expected: usize,
        found: usize,
    },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
}

/// Output of [`l2_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub vector: Vec<f64>,
    /// The input was the zero vector and was passed through unchanged.
    pub degenerate: bool,
}

/// Scales `v` to unit Euclidean norm. The zero vector maps to itself and is
/// flagged as degenerate.
pub fn l2_normalize(v: &[f64]) -> Result<Normalized, EmbedError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EmbedError::NonFiniteVector);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(Normalized {
            vector: v.to_vec(),
            degenerate: true,
        });
    }
    Ok(Normalized {
        vector: v.iter().map(|x| x / norm).collect(),
        degenerate: false,
    })
}

/// Token vectors for a sequence of sentences.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    raw: Vec<Vec<f32>>,
    unit: Vec<Vec<f64>>,
    provenance: String,
    degenerate: usize,
}

impl EmbeddingTable {
    /// Builds a table from flat per-sentence buffers of `token_count * dim`
    /// values and normalizes every vector.
    pub fn new(
        dim: usize,
        raw: Vec<Vec<f32>>,
        provenance: impl Into<String>,
    ) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        let mut unit = Vec::with_capacity(raw.len());
        let mut degenerate = 0;
        for (sentence, values) in raw.iter().enumerate() {
            if values.len() % dim != 0 {
                return Err(EmbedError::Ragged {
                    sentence,
                    len: values.len(),
                    dim,
                });
            }
            let mut out = Vec::with_capacity(values.len());
            for (token, chunk) in values.chunks(dim).enumerate() {
                let wide: Vec<f64> = chunk.iter().map(|&x| f64::from(x)).collect();
                let normalized = l2_normalize(&wide)
                    .map_err(|_| EmbedError::NonFinite { sentence, token })?;
                degenerate += usize::from(normalized.degenerate);
                out.extend(normalized.vector);
            }
            unit.push(out);
        }
        if degenerate > 0 {
            log::warn!("{degenerate} zero feature vectors left unnormalized");
        }
        Ok(Self {
            dim,
            raw,
            unit,
            provenance: provenance.into(),
            degenerate,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    /// Number of zero vectors seen at construction.
    pub fn degenerate_count(&self) -> usize {
        self.degenerate
    }

    pub fn token_count(&self, sentence: usize) -> usize {
        self.raw[sentence].len() / self.dim
    }

    /// Normalized vector of one token.
    pub fn vector(&self, sentence: usize, token: usize) -> &[f64] {
        &self.unit[sentence][token * self.dim..(token + 1) * self.dim]
    }

    /// Normalized vectors of one sentence, in token order.
    pub fn sentence(&self, sentence: usize) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.unit[sentence].chunks(self.dim)
    }

    /// Stored (pre-normalization) vector of one token.
    pub fn raw_vector(&self, sentence: usize, token: usize) -> &[f32] {
        &self.raw[sentence][token * self.dim..(token + 1) * self.dim]
    }

    /// Sub-table holding the given sentences, in the given order.
    pub fn select(&self, ids: &[usize]) -> EmbeddingTable {
        let unit: Vec<Vec<f64>> = ids.iter().map(|&i| self.unit[i].clone()).collect();
        let degenerate = unit
            .iter()
            .flat_map(|s| s.chunks(self.dim))
            .filter(|v| v.iter().all(|&x| x == 0.0))
            .count();
        EmbeddingTable {
            dim: self.dim,
            raw: ids.iter().map(|&i| self.raw[i].clone()).collect(),
            unit,
            provenance: self.provenance.clone(),
            degenerate,
        }
    }

    /// Checks that the table has one vector per token of `corpus`.
    pub fn check_alignment(&self, corpus: &[TaggedSentence]) -> Result<(), EmbedError> {
        if self.raw.len() != corpus.len() {
            return Err(EmbedError::SentenceCount {
                expected: corpus.len(),
                found: self.raw.len(),
            });
        }
        for (sentence, s) in corpus.iter().enumerate() {
            let found = self.token_count(sentence);
            if found != s.len() {
                return Err(EmbedError::Alignment {
                    sentence,
                    expected: s.len(),
                    found,
                });
            }
        }
        Ok(())
    }

    /// Serializes the table in the store format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let values: usize = self.raw.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(14 + 4 * self.raw.len() + 4 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.raw.len() as u32).to_le_bytes());
        for values in &self.raw {
            out.extend_from_slice(&((values.len() / self.dim) as u32).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses the store format.
    pub fn from_bytes(bytes: &[u8], provenance: impl Into<String>) -> Result<Self, EmbedError> {
        let mut reader = ByteReader { bytes, pos: 0 };
        if reader.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(EmbedError::BadMagic);
        }
        let dim = reader.u32("dim")? as usize;
        if dim == 0 {
            return Err(EmbedError::ZeroDim);
        }
        let count = reader.u32("sentence count")? as usize;
        let mut raw = Vec::with_capacity(count.min(1 << 20));
        for sentence in 0..count {
            let tokens = reader.u32("token count")? as usize;
            let what = format!("sentence {sentence} expects {tokens} vectors of dim {dim}");
            let data = reader.take(tokens * dim * 4, &what)?;
            raw.push(
                data.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            );
        }
        if reader.pos != bytes.len() {
            return Err(EmbedError::TrailingData(bytes.len() - reader.pos));
        }
        Self::new(dim, raw, provenance)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], EmbedError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(EmbedError::Truncated(format!(
                "{what} at byte {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, EmbedError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Sidecar metadata of an embedding store.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EmbeddingManifest {
    pub entries: BTreeMap<String, String>,
}

impl EmbeddingManifest {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    /// Provenance string: `provenance`, else `checkpoint`, else `"unknown"`.
    pub fn provenance(&self) -> &str {
        self.get("provenance")
            .or_else(|| self.get("checkpoint"))
            .unwrap_or("unknown")
    }

    pub fn parse(text: &str) -> Result<Self, EmbedError> {
        let mut entries = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| EmbedError::Manifest {
                line: idx + 1,
                reason: "expected key=value".into(),
            })?;
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

/// Path of the sidecar manifest for a store file.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest");
    PathBuf::from(name)
}

/// Hex SHA-256 of a corpus file's content.
pub fn corpus_digest(content: &[u8]) -> String {
    hex::encode(Sha256::digest(content))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EmbedError + '_ {
    move |source| EmbedError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the store file and its manifest.
pub fn write_embeddings(
    path: &Path,
    table: &EmbeddingTable,
    corpus_sha256: Option<&str>,
) -> Result<(), EmbedError> {
    fs::write(path, table.to_bytes()).map_err(io_err(path))?;
    let mut manifest = EmbeddingManifest::default();
    manifest.set("format", "FSEMB1");
    manifest.set("provenance", table.provenance());
    manifest.set("dim", table.dim().to_string());
    manifest.set("sentences", table.len().to_string());
    if let Some(digest) = corpus_sha256 {
        manifest.set("corpus_sha256", digest);
    }
    let mpath = manifest_path(path);
    fs::write(&mpath, manifest.render()).map_err(io_err(&mpath))
}

/// Reads the sidecar manifest, if there is one.
pub fn read_manifest(path: &Path) -> Result<Option<EmbeddingManifest>, EmbedError> {
    let mpath = manifest_path(path);
    match fs::read_to_string(&mpath) {
        Ok(text) => EmbeddingManifest::parse(&text).map(Some),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(&mpath)(e)),
    }
}

/// Loads a store file and checks it against the corpus it was built for.
pub fn load_embeddings(path: &Path, corpus: &[TaggedSentence]) -> Result<EmbeddingTable, EmbedError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let provenance = read_manifest(path)?
        .map(|m| m.provenance().to_string())
        .unwrap_or_else(|| "unknown".to_string());
    let table = EmbeddingTable::from_bytes(&bytes, provenance)?;
    table.check_alignment(corpus)?;
    Ok(table)
}

/// FNV-1a 64 of `namespace` followed by `feature`.
fn feature_hash(namespace: &[u8], feature: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(namespace);
    h.write(feature.as_bytes());
    h.finish()
}

fn add_feature(out: &mut [f64], namespace: &[u8], feature: &str, weight: f64) {
    let h = feature_hash(namespace, feature);
    let bucket = (h % out.len() as u64) as usize;
    let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
    out[bucket] += sign * weight;
}

/// Deterministic signed feature hashing of tokens in context.
///
/// Features per token, hashed with FNV-1a 64 into `dim` buckets (bucket =
/// hash mod dim, sign = top bit):
///
/// * the lowercased token, weight 1;
/// * character trigrams of `^token$`, each weighted `1/sqrt(n)` for `n`
///   trigrams;
/// * lowercased neighbors at offsets `±1..=±window`, weighted
///   `1/(1+|offset|)`, keyed by signed offset. Offsets outside the
///   sentence contribute nothing.
///
/// Each vector is L2-normalized before being stored as `f32`.
pub fn hash_featurize(
    corpus: &[TaggedSentence],
    dim: usize,
    window: usize,
) -> Result<EmbeddingTable, EmbedError> {
    if dim < 8 {
        return Err(EmbedError::DimTooSmall(dim));
    }
    let mut raw = Vec::with_capacity(corpus.len());
    for sentence in corpus {
        let lower: Vec<String> = sentence.tokens().iter().map(|t| t.to_lowercase()).collect();
        let mut values = Vec::with_capacity(lower.len() * dim);
        for (t, token) in lower.iter().enumerate() {
            let mut v = vec![0.0f64; dim];
            add_feature(&mut v, b"tok\x1f", token, 1.0);

            let marked: Vec<char> = std::iter::once('^')
                .chain(token.chars())
                .chain(std::iter::once('$'))
                .collect();
            let trigrams: Vec<String> = marked.windows(3).map(|w| w.iter().collect()).collect();
            let weight = 1.0 / (trigrams.len() as f64).sqrt();
            for gram in &trigrams {
                add_feature(&mut v, b"tri\x1f", gram, weight);
            }

            for offset in 1..=window {
                let weight = 1.0 / (1.0 + offset as f64);
                if let Some(left) = t.checked_sub(offset) {
                    let ns = format!("ctx-{offset}\x1f");
                    add_feature(&mut v, ns.as_bytes(), &lower[left], weight);
                }
                if let Some(right) = lower.get(t + offset) {
                    let ns = format!("ctx+{offset}\x1f");
                    add_feature(&mut v, ns.as_bytes(), right, weight);
                }
            }

            let normalized = l2_normalize(&v)?;
            values.extend(normalized.vector.iter().map(|&x| x as f32));
        }
        raw.push(values);
    }
    EmbeddingTable::new(dim, raw, HASH_PROVENANCE)
}
