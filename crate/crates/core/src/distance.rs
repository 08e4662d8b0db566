//! String and vector distances used for diversity scoring.
//!
//! Three families are provided:
//!
//! * normalized compression distance over raw DEFLATE output,
//! * cosine distance between character or word n-gram count vectors,
//! * cosine distance between precomputed sentence embeddings.
//!
//! Every family is exposed both as a free function on plain values and
//! through [`DistanceFunction`], which works on [`TestInput`]s and can
//! precompute per-input [`Features`] so repeated comparisons stay cheap.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Arc;

use flate2::{Compress, Compression, FlushCompress, Status};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{canonical_text, TestInput};

#[derive(Debug, Error)]
pub enum DistanceError {
    #[error("embedding table has no vector for id {0:?}")]
    MissingEmbedding(String),
    #[error("embedding for id {0:?} has zero norm")]
    ZeroNorm(String),
    #[error("{path}:{line}: {message}")]
    EmbeddingFormat { path: String, line: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unknown distance kind {0:?}")]
    UnknownKind(String),
}

// ---------------------------------------------------------------------------
// Compression
// ---------------------------------------------------------------------------

pub const DEFAULT_DEFLATE_LEVEL: u32 = 9;

/// Identifier of the DEFLATE implementation compiled into this build.
pub const DEFLATE_IMPLEMENTATION: &str = "flate2-1.1/zlib-rs-0.6";

/// Compressor used for C(x). Raw DEFLATE stream, no zlib or gzip framing,
/// no preset dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Compressor {
    Deflate { level: u32 },
}

impl Default for Compressor {
    fn default() -> Self {
        Compressor::Deflate {
            level: DEFAULT_DEFLATE_LEVEL,
        }
    }
}

/// Per-thread DEFLATE state, reset between calls instead of reallocated.
struct Scratch {
    level: u32,
    engine: Compress,
    input: Vec<u8>,
    output: Vec<u8>,
}

thread_local! {
    static SCRATCH: RefCell<Option<Scratch>> = const { RefCell::new(None) };
}

fn deflate_size(level: u32, parts: &[&[u8]]) -> usize {
    SCRATCH.with(|cell| {
        let mut slot = cell.borrow_mut();
        let scratch = match slot.as_mut() {
            Some(s) if s.level == level => {
                s.engine.reset();
                s
            }
            _ => slot.insert(Scratch {
                level,
                engine: Compress::new(Compression::new(level), false),
                input: Vec::new(),
                output: Vec::new(),
            }),
        };
        scratch.input.clear();
        for part in parts {
            scratch.input.extend_from_slice(part);
        }
        scratch.output.clear();
        // DEFLATE never grows input by more than a few bytes per 16 KiB block.
        scratch
            .output
            .reserve(scratch.input.len() + scratch.input.len() / 1000 + 64);
        loop {
            let consumed = scratch.engine.total_in() as usize;
            let status = scratch
                .engine
                .compress_vec(&scratch.input[consumed..], &mut scratch.output, FlushCompress::Finish)
                .expect("deflate on an in-memory buffer cannot fail");
            if status == Status::StreamEnd {
                break;
            }
            scratch.output.reserve(scratch.output.capacity().max(64));
        }
        scratch.engine.total_out() as usize
    })
}

impl Compressor {
    /// Stable identifier recorded in manifests and reports.
    pub fn id(&self) -> String {
        match self {
            Compressor::Deflate { level } => format!("deflate-raw/level={level}/{DEFLATE_IMPLEMENTATION}"),
        }
    }

    pub fn compressed_size(&self, data: &[u8]) -> usize {
        self.compressed_size_of_parts(&[data])
    }

    /// Compressed size of the concatenation of `parts`, without materializing it.
    pub fn compressed_size_of_parts(&self, parts: &[&[u8]]) -> usize {
        match *self {
            Compressor::Deflate { level } => deflate_size(level, parts),
        }
    }

    pub fn ncd(&self, x: &[u8], y: &[u8]) -> f64 {
        self.ncd_with_sizes(x, self.compressed_size(x), y, self.compressed_size(y))
    }

    /// Symmetrized NCD given already known C(x) and C(y).
    pub fn ncd_with_sizes(&self, x: &[u8], cx: usize, y: &[u8], cy: usize) -> f64 {
        if x.is_empty() && y.is_empty() {
            return 0.0;
        }
        let cxy = self.compressed_size_of_parts(&[x, y]);
        let cyx = self.compressed_size_of_parts(&[y, x]);
        symmetric_ncd(cx, cy, cxy, cyx)
    }
}

fn one_way_ncd(cx: usize, cy: usize, cxy: usize) -> f64 {
    let lo = cx.min(cy) as f64;
    let hi = cx.max(cy) as f64;
    (cxy as f64 - lo) / hi
}

fn symmetric_ncd(cx: usize, cy: usize, cxy: usize, cyx: usize) -> f64 {
    (one_way_ncd(cx, cy, cxy) + one_way_ncd(cx, cy, cyx)) / 2.0
}

/// C(x) with the default compressor.
pub fn compressed_size(x: &[u8]) -> usize {
    Compressor::default().compressed_size(x)
}

/// Symmetrized normalized compression distance with the default compressor:
/// the mean of `(C(xy) - min(C(x), C(y))) / max(C(x), C(y))` over both
/// concatenation orders. Values slightly above 1 are possible and kept.
pub fn ncd(x: &[u8], y: &[u8]) -> f64 {
    Compressor::default().ncd(x, y)
}

// ---------------------------------------------------------------------------
// n-grams
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramUnit {
    Char,
    Word,
}

/// Sparse n-gram count vector, sorted by gram.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GramCounts {
    counts: Vec<(String, u64)>,
    norm_sq: u64,
}

impl GramCounts {
    pub fn from_text(text: &str, unit: GramUnit, n: usize) -> Self {
        assert!(n >= 1, "n-gram size must be positive");
        let normalized: String = text.nfc().collect::<String>().to_lowercase();
        let mut map: BTreeMap<String, u64> = BTreeMap::new();
        match unit {
            GramUnit::Char => {
                let chars: Vec<char> = normalized.chars().collect();
                for w in chars.windows(n) {
                    *map.entry(w.iter().collect()).or_default() += 1;
                }
            }
            GramUnit::Word => {
                let words: Vec<&str> = normalized.split_whitespace().collect();
                for w in words.windows(n) {
                    *map.entry(w.join(" ")).or_default() += 1;
                }
            }
        }
        let norm_sq = map.values().map(|c| c * c).sum();
        Self {
            counts: map.into_iter().collect(),
            norm_sq,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.norm_sq == 0
    }

    pub fn get(&self, gram: &str) -> u64 {
        self.counts
            .binary_search_by(|(g, _)| g.as_str().cmp(gram))
            .map(|i| self.counts[i].1)
            .unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    fn dot(&self, other: &Self) -> u64 {
        let (mut i, mut j, mut acc) = (0, 0, 0u64);
        while i < self.counts.len() && j < other.counts.len() {
            match self.counts[i].0.cmp(&other.counts[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.counts[i].1 * other.counts[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    /// `1 - cos(self, other)`. Zero vs zero is 0, zero vs non-zero is 1.
    pub fn cosine_distance(&self, other: &Self) -> f64 {
        match (self.is_zero(), other.is_zero()) {
            (true, true) => return 0.0,
            (true, false) | (false, true) => return 1.0,
            _ => {}
        }
        if self == other {
            return 0.0;
        }
        let dot = self.dot(other) as f64;
        let denom = ((self.norm_sq as u128 * other.norm_sq as u128) as f64).sqrt();
        (1.0 - dot / denom).clamp(0.0, 1.0)
    }
}

/// Cosine distance between n-gram count vectors. Text is NFC-normalized and
/// lowercased; words are whitespace-separated tokens.
pub fn ngram_cosine(x: &str, y: &str, unit: GramUnit, n: usize) -> f64 {
    GramCounts::from_text(x, unit, n).cosine_distance(&GramCounts::from_text(y, unit, n))
}

// ---------------------------------------------------------------------------
// Embeddings
// ---------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum EmbeddingLine {
    Row { id: String, vector: Vec<f64> },
    Header { dim: usize, model: Option<String> },
}

/// Fixed-dimension vectors keyed by test id, produced offline.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    model: Option<String>,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, model: Option<String>, rows: Vec<(String, Vec<f64>)>) -> Result<Self, DistanceError> {
        let mut table = Self {
            dim,
            model,
            vectors: HashMap::with_capacity(rows.len()),
        };
        for (line, (id, v)) in rows.into_iter().enumerate() {
            table.insert(id, v, "<memory>", line + 1)?;
        }
        Ok(table)
    }

    fn insert(&mut self, id: String, vector: Vec<f64>, path: &str, line: usize) -> Result<(), DistanceError> {
        let fail = |message: String| DistanceError::EmbeddingFormat {
            path: path.to_string(),
            line,
            message,
        };
        if self.dim == 0 {
            return Err(fail("dimension must be positive".into()));
        }
        if vector.len() != self.dim {
            return Err(fail(format!(
                "vector for {id:?} has dimension {}, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(fail(format!("vector for {id:?} has a non-finite component")));
        }
        if self.vectors.insert(id.clone(), vector).is_some() {
            return Err(fail(format!("duplicate id {id:?}")));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DistanceError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let file = fs::File::open(path).map_err(|source| DistanceError::Io {
            path: display.clone(),
            source,
        })?;
        let mut dim = None;
        let mut model = None;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|source| DistanceError::Io {
                path: display.clone(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: EmbeddingLine = serde_json::from_str(&line).map_err(|e| DistanceError::EmbeddingFormat {
                path: display.clone(),
                line: line_no,
                message: e.to_string(),
            })?;
            match parsed {
                EmbeddingLine::Header { dim: d, model: m } if rows.is_empty() && dim.is_none() => {
                    dim = Some(d);
                    model = m;
                }
                EmbeddingLine::Header { .. } => {
                    return Err(DistanceError::EmbeddingFormat {
                        path: display,
                        line: line_no,
                        message: "header must be the first line".into(),
                    })
                }
                EmbeddingLine::Row { id, vector } => rows.push((line_no, id, vector)),
            }
        }
        let dim = dim.or_else(|| rows.first().map(|r| r.2.len())).unwrap_or(0);
        let mut table = Self {
            dim,
            model,
            vectors: HashMap::with_capacity(rows.len()),
        };
        for (line_no, id, vector) in rows {
            table.insert(id, vector, &display, line_no)?;
        }
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn model(&self) -> Option<&str> {
        self.model.as_deref()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    fn unit_vector(&self, id: &str) -> Result<Vec<f64>, DistanceError> {
        let v = self
            .get(id)
            .ok_or_else(|| DistanceError::MissingEmbedding(id.to_string()))?;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(DistanceError::ZeroNorm(id.to_string()));
        }
        Ok(v.iter().map(|x| x / norm).collect())
    }
}

fn unit_cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (1.0 - dot).clamp(0.0, 2.0)
}

/// `1 - cos` between two stored embeddings, in `[0, 2]`.
pub fn embedding_cosine(a: &str, b: &str, table: &EmbeddingTable) -> Result<f64, DistanceError> {
    let ua = table.unit_vector(a)?;
    if a == b {
        return Ok(0.0);
    }
    let ub = table.unit_vector(b)?;
    Ok(unit_cosine_distance(&ua, &ub))
}

// ---------------------------------------------------------------------------
// Distance functions over test inputs
// ---------------------------------------------------------------------------

/// A distance over [`TestInput`]s. Text-based kinds operate on
/// [`canonical_text`]; the embedding kind looks inputs up by id.
#[derive(Debug, Clone)]
pub enum DistanceFunction {
    Ncd(Compressor),
    Ngram { unit: GramUnit, n: usize },
    Embedding(Arc<EmbeddingTable>),
}

/// Per-input precomputation for a [`DistanceFunction`].
#[derive(Debug, Clone)]
pub struct Features {
    id: String,
    repr: FeatureRepr,
}

#[derive(Debug, Clone)]
enum FeatureRepr {
    Compressed { bytes: Vec<u8>, size: usize },
    Grams(GramCounts),
    Unit(Vec<f64>),
}

impl Features {
    pub fn id(&self) -> &str {
        &self.id
    }
}

impl DistanceFunction {
    pub fn ncd() -> Self {
        DistanceFunction::Ncd(Compressor::default())
    }

    pub fn char_bigram() -> Self {
        DistanceFunction::Ngram {
            unit: GramUnit::Char,
            n: 2,
        }
    }

    pub fn word_bigram() -> Self {
        DistanceFunction::Ngram {
            unit: GramUnit::Word,
            n: 2,
        }
    }

    /// Short label such as `ncd`, `ngram_char2` or `embedding`.
    pub fn kind(&self) -> String {
        match self {
            DistanceFunction::Ncd(_) => "ncd".into(),
            DistanceFunction::Ngram {
                unit: GramUnit::Char,
                n,
            } => format!("ngram_char{n}"),
            DistanceFunction::Ngram {
                unit: GramUnit::Word,
                n,
            } => format!("ngram_word{n}"),
            DistanceFunction::Embedding(_) => "embedding".into(),
        }
    }

    /// Parameters recorded in manifests.
    pub fn describe(&self) -> serde_json::Value {
        match self {
            DistanceFunction::Ncd(c) => serde_json::json!({"kind": self.kind(), "compressor": c.id()}),
            DistanceFunction::Ngram { unit, n } => serde_json::json!({"kind": self.kind(), "unit": unit, "n": n}),
            DistanceFunction::Embedding(t) => serde_json::json!({
                "kind": self.kind(),
                "dim": t.dim(),
                "model": t.model(),
            }),
        }
    }

    pub fn is_vector_based(&self) -> bool {
        !matches!(self, DistanceFunction::Ncd(_))
    }

    pub fn features(&self, input: &TestInput) -> Result<Features, DistanceError> {
        let repr = match self {
            DistanceFunction::Ncd(c) => {
                let bytes = canonical_text(input).into_bytes();
                let size = c.compressed_size(&bytes);
                FeatureRepr::Compressed { bytes, size }
            }
            DistanceFunction::Ngram { unit, n } => {
                FeatureRepr::Grams(GramCounts::from_text(&canonical_text(input), *unit, *n))
            }
            DistanceFunction::Embedding(table) => FeatureRepr::Unit(table.unit_vector(&input.id)?),
        };
        Ok(Features {
            id: input.id.clone(),
            repr,
        })
    }

    /// Distance between two feature sets produced by this function.
    ///
    /// Panics if the features come from a different kind of distance.
    pub fn between(&self, a: &Features, b: &Features) -> f64 {
        match (self, &a.repr, &b.repr) {
            (
                DistanceFunction::Ncd(c),
                FeatureRepr::Compressed { bytes: xa, size: ca },
                FeatureRepr::Compressed { bytes: xb, size: cb },
            ) => c.ncd_with_sizes(xa, *ca, xb, *cb),
            (DistanceFunction::Ngram { .. }, FeatureRepr::Grams(ga), FeatureRepr::Grams(gb)) => ga.cosine_distance(gb),
            (DistanceFunction::Embedding(_), FeatureRepr::Unit(ua), FeatureRepr::Unit(ub)) => {
                if a.id == b.id {
                    0.0
                } else {
                    unit_cosine_distance(ua, ub)
                }
            }
            _ => panic!("features do not belong to distance {}", self.kind()),
        }
    }

    pub fn distance(&self, a: &TestInput, b: &TestInput) -> Result<f64, DistanceError> {
        Ok(self.between(&self.features(a)?, &self.features(b)?))
    }
}
