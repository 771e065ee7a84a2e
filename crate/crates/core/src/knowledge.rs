//! Remediation knowledge base with lexical and embedding search.
//!
//! Documents are split into chunks of at most `chunk_tokens` tokens at
//! paragraph boundaries; both indexes work on chunks. The store persists
//! to a directory holding `sparse.json` (chunks and the inverted index) and
//! `dense.bin` (a little-endian `u32` dimension followed by `f32` rows).

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{split_tokens, truncate_to_tokens, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocKind {
    QaRecord,
    Manual,
    CaseStudy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeDoc {
    pub doc_id: String,
    pub kind: DocKind,
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    /// `doc_id#ordinal`.
    pub id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub kind: DocKind,
    pub title: String,
    pub text: String,
    pub token_count: usize,
}

impl Chunk {
    /// Text that gets indexed: the title followed by the chunk body.
    pub fn indexed_text(&self) -> String {
        format!("{}\n{}", self.title, self.text)
    }
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("duplicate doc_id {0}")]
    DuplicateDoc(String),
    #[error("document {0} has an empty body")]
    EmptyBody(String),
    #[error("{path}:{line}: {message}")]
    Jsonl {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt index {path}: {message}")]
    Corrupt { path: String, message: String },
    #[error("index was built with embedder {found}, expected {expected}")]
    EmbedderMismatch { found: String, expected: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KbError + '_ {
    move |source| KbError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads one [`KnowledgeDoc`] per non-blank line.
pub fn load_jsonl(path: &Path) -> Result<Vec<KnowledgeDoc>, KbError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc = serde_json::from_str(&line).map_err(|e| KbError::Jsonl {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

/// Splits `text` into pieces of at most `max` tokens: whole paragraphs
/// where possible, then lines, then raw token windows.
fn split_paragraphs(text: &str, max: usize, tok: &dyn Tokenizer) -> Vec<String> {
    let mut units: Vec<String> = Vec::new();
    for para in text.split("\n\n").map(str::trim).filter(|p| !p.is_empty()) {
        if tok.count(para) <= max {
            units.push(para.to_string());
            continue;
        }
        for line in para.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let mut rest = line;
            while tok.count(rest) > max {
                let head = truncate_to_tokens(rest, max);
                units.push(head.to_string());
                rest = rest[head.len()..].trim_start();
            }
            if !rest.is_empty() {
                units.push(rest.to_string());
            }
        }
    }
    let mut chunks: Vec<String> = Vec::new();
    let mut current = String::new();
    for unit in units {
        let candidate = if current.is_empty() {
            unit.clone()
        } else {
            format!("{current}\n\n{unit}")
        };
        if tok.count(&candidate) <= max || current.is_empty() {
            current = candidate;
        } else {
            chunks.push(std::mem::replace(&mut current, unit));
        }
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    chunks
}

pub fn chunk_doc(doc: &KnowledgeDoc, max_tokens: usize, tok: &dyn Tokenizer) -> Vec<Chunk> {
    let pieces = if tok.count(&doc.body) <= max_tokens {
        vec![doc.body.clone()]
    } else {
        split_paragraphs(&doc.body, max_tokens, tok)
    };
    pieces
        .into_iter()
        .enumerate()
        .map(|(ordinal, text)| Chunk {
            id: format!("{}#{ordinal}", doc.doc_id),
            doc_id: doc.doc_id.clone(),
            ordinal,
            kind: doc.kind,
            title: doc.title.clone(),
            token_count: tok.count(&text),
            text,
        })
        .collect()
}

/// Lowercased alphanumeric terms.
pub fn terms(text: &str) -> impl Iterator<Item = String> + '_ {
    split_tokens(text)
        .filter(|t| t.chars().all(char::is_alphanumeric))
        .map(str::to_lowercase)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// A search result: index into the store's chunk list and its score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit<F> {
    pub chunk: usize,
    pub score: F,
}

/// Inverted index with BM25 scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseIndex {
    pub params: Bm25Params,
    /// term -> (chunk index, term frequency), ascending by chunk index.
    pub postings: BTreeMap<String, Vec<(u32, u32)>>,
    pub doc_lengths: Vec<u32>,
}

impl SparseIndex {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, params: Bm25Params) -> Self {
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_lengths = Vec::new();
        for (i, text) in texts.into_iter().enumerate() {
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            let mut len = 0;
            for t in terms(text) {
                *tf.entry(t).or_default() += 1;
                len += 1;
            }
            doc_lengths.push(len);
            for (t, f) in tf {
                postings.entry(t).or_default().push((i as u32, f));
            }
        }
        SparseIndex {
            params,
            postings,
            doc_lengths,
        }
    }

    pub fn len(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lengths.is_empty()
    }

    pub fn avg_doc_len(&self) -> f64 {
        if self.doc_lengths.is_empty() {
            return 0.0;
        }
        self.doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / self.doc_lengths.len() as f64
    }

    /// `ln(1 + (N - df + 0.5) / (df + 0.5))`.
    pub fn idf<F: Float>(&self, term: &str) -> F {
        let c = |x: f64| F::from(x).unwrap();
        let n = c(self.len() as f64);
        let df = c(self.postings.get(term).map_or(0, Vec::len) as f64);
        let half = c(0.5);
        (F::one() + (n - df + half) / (df + half)).ln()
    }

    /// BM25 score of every chunk containing at least one query term.
    /// Repeated query terms count once.
    pub fn scores<F: Float>(&self, query: &str) -> BTreeMap<usize, F> {
        let c = |x: f64| F::from(x).unwrap();
        let k1 = c(self.params.k1);
        let b = c(self.params.b);
        let avg = c(self.avg_doc_len());
        let mut out: BTreeMap<usize, F> = BTreeMap::new();
        let unique: BTreeSet<String> = terms(query).collect();
        for term in unique {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf::<F>(&term);
            for &(doc, tf) in list {
                let tf = c(tf as f64);
                let dl = c(self.doc_lengths[doc as usize] as f64);
                let norm = if avg > F::zero() { dl / avg } else { F::zero() };
                let s = idf * tf * (k1 + F::one()) / (tf + k1 * (F::one() - b + b * norm));
                let e = out.entry(doc as usize).or_insert_with(F::zero);
                *e = *e + s;
            }
        }
        out
    }
}

pub trait Embedder: Send + Sync {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f32>;
}

/// Hashes each term (FNV-1a) into one of `dim` buckets, then
/// L2-normalizes the counts.
#[derive(Debug, Clone, Copy)]
pub struct HashedBowEmbedder {
    pub dim: usize,
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        HashedBowEmbedder { dim: 512 }
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl HashedBowEmbedder {
    pub fn bucket(&self, term: &str) -> usize {
        (fnv1a(term.as_bytes()) % self.dim as u64) as usize
    }
}

impl Embedder for HashedBowEmbedder {
    fn name(&self) -> String {
        format!("hashed-bow-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0f64; self.dim];
        for t in terms(text) {
            v[self.bucket(&t)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter().map(|x| (x / norm) as f32).collect()
        } else {
            vec![0.0; self.dim]
        }
    }
}

pub fn cosine<F: Float>(a: &[f32], b: &[f32]) -> F {
    let c = |x: f32| F::from(x).unwrap();
    let mut dot = F::zero();
    let mut na = F::zero();
    let mut nb = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + c(x) * c(y);
        na = na + c(x) * c(x);
        nb = nb + c(y) * c(y);
    }
    if na == F::zero() || nb == F::zero() {
        F::zero()
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    pub dim: usize,
    pub vectors: Vec<Vec<f32>>,
}

impl DenseIndex {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.vectors.len() * self.dim * 4);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.vectors {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 4 {
            return Err("missing dimension header".into());
        }
        let dim = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let body = &bytes[4..];
        if dim == 0 || body.len() % (dim * 4) != 0 {
            return Err(format!("{} payload bytes do not form rows of dimension {dim}", body.len()));
        }
        let vectors = body
            .chunks_exact(dim * 4)
            .map(|row| {
                row.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect()
            })
            .collect();
        Ok(DenseIndex { dim, vectors })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KbConfig {
    pub chunk_tokens: usize,
    pub bm25: Bm25Params,
}

impl Default for KbConfig {
    fn default() -> Self {
        KbConfig {
            chunk_tokens: 512,
            bm25: Bm25Params::default(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SparseFile {
    embedder: String,
    chunks: Vec<Chunk>,
    index: SparseIndex,
}

/// Immutable chunk store with both indexes.
#[derive(Clone)]
pub struct KnowledgeStore {
    chunks: Vec<Chunk>,
    sparse: SparseIndex,
    dense: DenseIndex,
    embedder: Arc<dyn Embedder>,
}

impl std::fmt::Debug for KnowledgeStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KnowledgeStore")
            .field("chunks", &self.chunks.len())
            .field("embedder", &self.embedder.name())
            .finish()
    }
}

pub const SPARSE_FILE: &str = "sparse.json";
pub const DENSE_FILE: &str = "dense.bin";

fn rank<F: Float>(chunks: &[Chunk], scored: impl IntoIterator<Item = (usize, F)>, k: usize) -> Vec<Hit<F>> {
    let mut hits: Vec<Hit<F>> = scored
        .into_iter()
        .map(|(chunk, score)| Hit { chunk, score })
        .collect();
    hits.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| chunks[a.chunk].id.cmp(&chunks[b.chunk].id))
    });
    hits.truncate(k);
    hits
}

impl KnowledgeStore {
    /// Builds both indexes. Documents are ordered by id so that the same
    /// input always yields the same index.
    pub fn ingest(
        docs: &[KnowledgeDoc],
        cfg: &KbConfig,
        embedder: Arc<dyn Embedder>,
        tok: &dyn Tokenizer,
    ) -> Result<Self, KbError> {
        let mut seen = BTreeSet::new();
        for d in docs {
            if !seen.insert(d.doc_id.as_str()) {
                return Err(KbError::DuplicateDoc(d.doc_id.clone()));
            }
            if d.body.trim().is_empty() {
                return Err(KbError::EmptyBody(d.doc_id.clone()));
            }
        }
        let mut sorted: Vec<&KnowledgeDoc> = docs.iter().collect();
        sorted.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        let chunks: Vec<Chunk> = sorted
            .into_iter()
            .flat_map(|d| chunk_doc(d, cfg.chunk_tokens.max(1), tok))
            .collect();
        let texts: Vec<String> = chunks.iter().map(Chunk::indexed_text).collect();
        let sparse = SparseIndex::build(texts.iter().map(String::as_str), cfg.bm25.clone());
        let dense = DenseIndex {
            dim: embedder.dim(),
            vectors: texts.iter().map(|t| embedder.embed(t)).collect(),
        };
        Ok(KnowledgeStore {
            chunks,
            sparse,
            dense,
            embedder,
        })
    }

    pub fn empty() -> Self {
        Self::ingest(&[], &KbConfig::default(), Arc::new(HashedBowEmbedder::default()), &crate::ingest::RegexTokenizer)
            .expect("empty corpus is valid")
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn chunk(&self, index: usize) -> &Chunk {
        &self.chunks[index]
    }

    pub fn chunk_by_id(&self, id: &str) -> Option<&Chunk> {
        self.chunks.iter().find(|c| c.id == id)
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn sparse(&self) -> &SparseIndex {
        &self.sparse
    }

    pub fn dense(&self) -> &DenseIndex {
        &self.dense
    }

    /// Top `k` chunks by BM25, ties broken by chunk id.
    pub fn sparse_search<F: Float>(&self, query: &str, k: usize) -> Vec<Hit<F>> {
        rank(&self.chunks, self.sparse.scores::<F>(query), k)
    }

    /// Top `k` chunks by cosine similarity to the query embedding.
    pub fn dense_search<F: Float>(&self, query: &str, k: usize) -> Vec<Hit<F>> {
        if query.trim().is_empty() {
            return Vec::new();
        }
        let q = self.embedder.embed(query);
        let scored = self
            .dense
            .vectors
            .iter()
            .enumerate()
            .map(|(i, v)| (i, cosine::<F>(&q, v)));
        rank(&self.chunks, scored, k)
    }

    pub fn sparse_json(&self) -> String {
        let file = SparseFile {
            embedder: self.embedder.name(),
            chunks: self.chunks.clone(),
            index: self.sparse.clone(),
        };
        serde_json::to_string_pretty(&file).expect("index serializes")
    }

    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf), KbError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let sparse = dir.join(SPARSE_FILE);
        let dense = dir.join(DENSE_FILE);
        std::fs::write(&sparse, self.sparse_json()).map_err(io_err(&sparse))?;
        std::fs::write(&dense, self.dense.to_bytes()).map_err(io_err(&dense))?;
        Ok((sparse, dense))
    }

    /// Loads a saved store. `embedder` must be the one the store was built
    /// with, since queries are embedded at search time.
    pub fn load(dir: &Path, embedder: Arc<dyn Embedder>) -> Result<Self, KbError> {
        let sparse_path = dir.join(SPARSE_FILE);
        let dense_path = dir.join(DENSE_FILE);
        let text = std::fs::read_to_string(&sparse_path).map_err(io_err(&sparse_path))?;
        let file: SparseFile = serde_json::from_str(&text).map_err(|e| KbError::Corrupt {
            path: sparse_path.display().to_string(),
            message: e.to_string(),
        })?;
        if file.embedder != embedder.name() {
            return Err(KbError::EmbedderMismatch {
                found: file.embedder,
                expected: embedder.name(),
            });
        }
        let bytes = std::fs::read(&dense_path).map_err(io_err(&dense_path))?;
        let corrupt = |message: String| KbError::Corrupt {
            path: dense_path.display().to_string(),
            message,
        };
        let dense = DenseIndex::from_bytes(&bytes).map_err(corrupt)?;
        if dense.dim != embedder.dim() || dense.vectors.len() != file.chunks.len() {
            return Err(corrupt(format!(
                "{} rows of dimension {} for {} chunks",
                dense.vectors.len(),
                dense.dim,
                file.chunks.len()
            )));
        }
        if file.index.len() != file.chunks.len() {
            return Err(KbError::Corrupt {
                path: sparse_path.display().to_string(),
                message: "doc_lengths and chunks disagree".into(),
            });
        }
        Ok(KnowledgeStore {
            chunks: file.chunks,
            sparse: file.index,
            dense,
            embedder,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::RegexTokenizer;
    use proptest::prelude::*;

    fn doc(id: &str, body: &str) -> KnowledgeDoc {
        KnowledgeDoc {
            doc_id: id.into(),
            kind: DocKind::QaRecord,
            title: String::new(),
            body: body.into(),
            token_count: 0,
        }
    }

    fn store(docs: &[KnowledgeDoc]) -> KnowledgeStore {
        KnowledgeStore::ingest(docs, &KbConfig::default(), Arc::new(HashedBowEmbedder::default()), &RegexTokenizer).unwrap()
    }

    #[test]
    fn basic_ingest() {
        let s = store(&[doc("a", "alpha"), doc("b", "beta"), doc("c", "gamma")]);
        assert_eq!(s.sparse().doc_lengths.len(), 3);
        assert_eq!(s.dense().vectors.len(), 3);
        let e = store(&[]);
        assert!(e.is_empty());
        assert!(e.sparse_search::<f64>("anything", 5).is_empty());
    }

    #[test]
    fn duplicate_and_empty_rejected() {
        let cfg = KbConfig::default();
        let emb = Arc::new(HashedBowEmbedder::default());
        assert!(matches!(
            KnowledgeStore::ingest(&[doc("a", "x"), doc("a", "y")], &cfg, emb.clone(), &RegexTokenizer),
            Err(KbError::DuplicateDoc(_))
        ));
        assert!(matches!(
            KnowledgeStore::ingest(&[doc("a", "  ")], &cfg, emb, &RegexTokenizer),
            Err(KbError::EmptyBody(_))
        ));
    }

    #[test]
    fn reingest_is_byte_identical() {
        let docs = [doc("b", "retry the flaky job"), doc("a", "clear the cache")];
        let mut rev = docs.clone();
        rev.reverse();
        let (x, y) = (store(&docs), store(&rev));
        assert_eq!(x.sparse_json(), y.sparse_json());
        assert_eq!(x.dense().to_bytes(), y.dense().to_bytes());
    }

    #[test]
    fn bm25_prefers_higher_tf() {
        let s = store(&[doc("a", "timeout timeout other"), doc("b", "timeout other thing")]);
        let hits = s.sparse_search::<f64>("timeout", 10);
        assert_eq!(s.chunk(hits[0].chunk).doc_id, "a");
        assert!(hits[0].score > hits[1].score);
        assert!(s.sparse_search::<f64>("absent", 10).is_empty());
        let one = store(&[doc("a", "timeout")]);
        assert!(one.sparse_search::<f64>("timeout", 1)[0].score > 0.0);
    }

    #[test]
    fn dense_self_similarity_and_orthogonality() {
        let emb = HashedBowEmbedder::default();
        let a_words = ["alpha", "bravo", "charlie"];
        let b_words = ["delta", "echo", "foxtrot"];
        let ab: BTreeSet<usize> = a_words.iter().map(|w| emb.bucket(w)).collect();
        assert!(b_words.iter().all(|w| !ab.contains(&emb.bucket(w))));
        let s = store(&[doc("a", &a_words.join(" ")), doc("b", &b_words.join(" "))]);
        let hits = s.dense_search::<f64>(&a_words.join(" "), 10);
        assert_eq!(hits.len(), 2);
        assert_eq!(s.chunk(hits[0].chunk).doc_id, "a");
        assert!((hits[0].score - 1.0).abs() < 1e-9);
        assert_eq!(hits[1].score, 0.0);
    }

    #[test]
    fn long_docs_are_chunked() {
        let para = (0..100).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let body = vec![para; 8].join("\n\n");
        let d = doc("big", &body);
        let chunks = chunk_doc(&d, 512, &RegexTokenizer);
        assert!(chunks.len() >= 2);
        assert!(chunks.iter().all(|c| c.token_count <= 512));
        assert_eq!(chunks[1].id, "big#1");
        let giant = doc("line", &"tok ".repeat(2000));
        assert!(chunk_doc(&giant, 512, &RegexTokenizer).iter().all(|c| c.token_count <= 512));
    }

    #[test]
    fn persistence_round_trip() {
        let s = store(&[doc("a", "retry the job"), doc("b", "pin the dependency version")]);
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let back = KnowledgeStore::load(dir.path(), Arc::new(HashedBowEmbedder::default())).unwrap();
        assert_eq!(back.chunks(), s.chunks());
        assert_eq!(back.sparse(), s.sparse());
        assert_eq!(back.dense(), s.dense());
        assert!(matches!(
            KnowledgeStore::load(dir.path(), Arc::new(HashedBowEmbedder { dim: 64 })),
            Err(KbError::EmbedderMismatch { .. })
        ));
    }

    #[test]
    fn jsonl_loading() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("kb.jsonl");
        std::fs::write(&p, "{\"doc_id\":\"a\",\"kind\":\"manual\",\"title\":\"T\",\"body\":\"B\"}\n\n").unwrap();
        let docs = load_jsonl(&p).unwrap();
        assert_eq!(docs[0].kind, DocKind::Manual);
        std::fs::write(&p, "{\"doc_id\":\"a\"}\n").unwrap();
        assert!(matches!(load_jsonl(&p), Err(KbError::Jsonl { line: 1, .. })));
    }

    fn brute_bm25(docs: &[Vec<String>], query: &[String], k1: f64, b: f64) -> Vec<f64> {
        let n = docs.len() as f64;
        let avg = docs.iter().map(|d| d.len() as f64).sum::<f64>() / n;
        let q: BTreeSet<&String> = query.iter().collect();
        docs.iter()
            .map(|d| {
                q.iter()
                    .map(|t| {
                        let df = docs.iter().filter(|x| x.contains(t)).count() as f64;
                        let tf = d.iter().filter(|x| x == t).count() as f64;
                        let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                        idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * d.len() as f64 / avg))
                    })
                    .sum()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn bm25_matches_brute_force(
            corpus in proptest::collection::vec(proptest::collection::vec("[a-e]", 1..12), 1..20),
            query in proptest::collection::vec("[a-f]", 1..4),
        ) {
            let texts: Vec<String> = corpus.iter().map(|d| d.join(" ")).collect();
            let idx = SparseIndex::build(texts.iter().map(String::as_str), Bm25Params::default());
            let scores = idx.scores::<f64>(&query.join(" "));
            let expect = brute_bm25(&corpus, &query, 1.2, 0.75);
            for (i, e) in expect.iter().enumerate() {
                let got = scores.get(&i).copied().unwrap_or(0.0);
                prop_assert!((got - e).abs() < 1e-9, "doc {}: {} vs {}", i, got, e);
            }
        }

        #[test]
        fn dense_exact_body_ranks_first(bodies in proptest::collection::vec("[a-z]{1,6}( [a-z]{1,6}){0,8}", 1..10), pick in any::<proptest::sample::Index>()) {
            let mut uniq: Vec<String> = Vec::new();
            for b in bodies {
                if !uniq.contains(&b) {
                    uniq.push(b);
                }
            }
            let docs: Vec<KnowledgeDoc> = uniq.iter().enumerate().map(|(i, b)| doc(&format!("d{i:02}"), b)).collect();
            let s = store(&docs);
            let target = pick.index(docs.len());
            let hits = s.dense_search::<f64>(&format!("\n{}", docs[target].body), docs.len());
            prop_assert!((hits[0].score - 1.0).abs() < 1e-9);
            let top_score = hits[0].score;
            prop_assert!(hits.iter().any(|h| h.chunk == target && (h.score - top_score).abs() < 1e-9));
        }
    }
}
