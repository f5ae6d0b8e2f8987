//! Fused cosine retrieval over modality pairs.
//!
//! A [`SimilarityConfig`] lists weighted `(query modality, memory modality)`
//! pairs. The score of a memory item is the weighted sum of cosines over those
//! pairs, computed from unit vectors. When an adapter is attached, query-side
//! vectors go through the query matrices and memory-side vectors through the
//! context matrices, and are renormalized before the dot product.
//!
//! Search is exact. Results are ordered by descending score with ties broken
//! by ascending candidate id.

mod mmices;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use mmices::{mmices_retrieve, Mmices};

use crate::corpus::{Corpus, ExampleRecord, Modality};
use crate::error::{Error, Result};
use crate::trainer::{ProjectionAdapter, Side, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimilarityMode {
    /// Query image against memory image.
    #[serde(rename = "QIMI")]
    Qimi,
    /// Query text against memory text.
    #[serde(rename = "QTMT")]
    Qtmt,
    /// Query image against memory image and memory text.
    #[serde(rename = "QIMIT")]
    Qimit,
    /// Image against image plus text against text; the default for image-question queries.
    #[serde(rename = "QITMIT")]
    Qitmit,
    #[serde(rename = "custom")]
    Custom,
}

impl fmt::Display for SimilarityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityMode::Qimi => "QIMI",
            SimilarityMode::Qtmt => "QTMT",
            SimilarityMode::Qimit => "QIMIT",
            SimilarityMode::Qitmit => "QITMIT",
            SimilarityMode::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairWeight {
    pub query: Modality,
    pub memory: Modality,
    pub weight: f64,
}

impl PairWeight {
    pub const fn new(query: Modality, memory: Modality, weight: f64) -> Self {
        Self { query, memory, weight }
    }
}

impl SimilarityMode {
    /// The weighted pairs a named mode expands to; `Custom` has none.
    pub fn pairs(self) -> Vec<PairWeight> {
        use Modality::{Image, Text};
        match self {
            SimilarityMode::Qimi => vec![PairWeight::new(Image, Image, 1.0)],
            SimilarityMode::Qtmt => vec![PairWeight::new(Text, Text, 1.0)],
            SimilarityMode::Qimit => vec![
                PairWeight::new(Image, Image, 1.0),
                PairWeight::new(Image, Text, 1.0),
            ],
            SimilarityMode::Qitmit => vec![
                PairWeight::new(Image, Image, 1.0),
                PairWeight::new(Text, Text, 1.0),
            ],
            SimilarityMode::Custom => Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimilarityConfig {
    pub mode: SimilarityMode,
    pub pairs: Vec<PairWeight>,
    pub adapter: Option<Arc<ProjectionAdapter>>,
}

impl SimilarityConfig {
    pub fn new(mode: SimilarityMode) -> Self {
        Self {
            mode,
            pairs: mode.pairs(),
            adapter: None,
        }
    }

    pub fn custom(pairs: Vec<PairWeight>) -> Self {
        Self {
            mode: SimilarityMode::Custom,
            pairs,
            adapter: None,
        }
    }

    pub fn with_adapter(mut self, adapter: Arc<ProjectionAdapter>) -> Self {
        self.adapter = Some(adapter);
        self
    }

    /// Distinct modalities read on one side, in pair order.
    pub fn modalities(&self, side: Side) -> Vec<Modality> {
        let mut out = Vec::new();
        for p in &self.pairs {
            let m = match side {
                Side::Query => p.query,
                Side::Context => p.memory,
            };
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out
    }

    fn check(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::InvalidArgument("similarity config has no modality pairs".into()));
        }
        if self.pairs.iter().any(|p| !p.weight.is_finite()) {
            return Err(Error::InvalidArgument("pair weights must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub ranked: Vec<ScoredCandidate>,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<&str> {
        self.ranked.iter().map(|c| c.id.as_str()).collect()
    }
}

/// Descending score, then ascending id.
pub fn rank_order(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

/// Dot product with `f32` lane accumulation and an `f64` reduction over lanes.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    for (l, (x, y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        lanes[l] += x * y;
    }
    lanes.iter().map(|&v| f64::from(v)).sum()
}

/// Unit vector for one modality of `record`, projected when an adapter is given.
pub(crate) fn prepared_vector(
    corpus: &Corpus,
    record: &ExampleRecord,
    modality: Modality,
    projection: Option<(&ProjectionAdapter, Side)>,
) -> Result<Vec<f32>> {
    let raw = corpus
        .embedding(record, modality)
        .ok_or_else(|| Error::UnresolvedModality {
            record: record.id.clone(),
            modality: modality.to_string(),
        })?;
    let mut v: Vec<f64> = raw.iter().map(|&x| f64::from(x)).collect();
    if let Some((adapter, side)) = projection {
        if adapter.dim() != v.len() {
            return Err(Error::DimensionMismatch {
                declared: adapter.dim(),
                actual: v.len(),
            });
        }
        v = adapter.project(Slot::of(side, modality), &v);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroProjection(record.id.clone()));
    }
    Ok(v.iter().map(|x| (x / norm) as f32).collect())
}

/// Prepared per-modality vectors for one query.
#[derive(Debug, Clone)]
pub struct QueryVectors {
    id: String,
    vectors: BTreeMap<Modality, Vec<f32>>,
}

impl QueryVectors {
    pub fn build(query: &ExampleRecord, corpus: &Corpus, cfg: &SimilarityConfig) -> Result<Self> {
        let projection = cfg.adapter.as_deref().map(|a| (a, Side::Query));
        let mut vectors = BTreeMap::new();
        for m in cfg.modalities(Side::Query) {
            vectors.insert(m, prepared_vector(corpus, query, m, projection)?);
        }
        Ok(Self {
            id: query.id.clone(),
            vectors,
        })
    }
}

/// Fused similarity between a query and a single memory item.
pub fn fused_similarity(
    query: &ExampleRecord,
    query_corpus: &Corpus,
    item: &ExampleRecord,
    memory: &Corpus,
    cfg: &SimilarityConfig,
) -> Result<f64> {
    cfg.check()?;
    let q = QueryVectors::build(query, query_corpus, cfg)?;
    let projection = cfg.adapter.as_deref().map(|a| (a, Side::Context));
    let mut acc = 0.0;
    for p in &cfg.pairs {
        let m = prepared_vector(memory, item, p.memory, projection)?;
        let qv = &q.vectors[&p.query];
        check_dims(qv.len(), m.len())?;
        acc += p.weight * dot(qv, &m);
    }
    Ok(acc + 0.0)
}

fn check_dims(query: usize, memory: usize) -> Result<()> {
    if query != memory {
        return Err(Error::DimensionMismatch {
            declared: memory,
            actual: query,
        });
    }
    Ok(())
}

/// Exact search index over a memory corpus for one similarity configuration.
pub struct Retriever<'m> {
    memory: &'m Corpus,
    cfg: SimilarityConfig,
    dims: BTreeMap<Modality, usize>,
    vectors: BTreeMap<Modality, Vec<f32>>,
}

impl<'m> Retriever<'m> {
    pub fn new(memory: &'m Corpus, cfg: SimilarityConfig) -> Result<Self> {
        cfg.check()?;
        if memory.is_empty() {
            return Err(Error::EmptyMemory);
        }
        let projection = cfg.adapter.as_deref().map(|a| (a, Side::Context));
        let mut dims = BTreeMap::new();
        let mut vectors = BTreeMap::new();
        for m in cfg.modalities(Side::Context) {
            let dim = memory
                .matrix(m)
                .map(|mat| mat.dim())
                .ok_or_else(|| Error::UnresolvedModality {
                    record: memory.records[0].id.clone(),
                    modality: m.to_string(),
                })?;
            let mut flat = Vec::with_capacity(dim * memory.len());
            for r in &memory.records {
                flat.extend(prepared_vector(memory, r, m, projection)?);
            }
            dims.insert(m, dim);
            vectors.insert(m, flat);
        }
        Ok(Self {
            memory,
            cfg,
            dims,
            vectors,
        })
    }

    pub fn config(&self) -> &SimilarityConfig {
        &self.cfg
    }

    pub fn memory(&self) -> &'m Corpus {
        self.memory
    }

    pub fn query_vectors(&self, query: &ExampleRecord, corpus: &Corpus) -> Result<QueryVectors> {
        let q = QueryVectors::build(query, corpus, &self.cfg)?;
        for p in &self.cfg.pairs {
            check_dims(q.vectors[&p.query].len(), self.dims[&p.memory])?;
        }
        Ok(q)
    }

    /// Fused score of memory item `index`.
    pub fn score(&self, q: &QueryVectors, index: usize) -> f64 {
        let mut acc = 0.0;
        for p in &self.cfg.pairs {
            let dim = self.dims[&p.memory];
            let row = &self.vectors[&p.memory][index * dim..(index + 1) * dim];
            acc += p.weight * dot(&q.vectors[&p.query], row);
        }
        acc + 0.0
    }

    /// Top `k` memory items restricted to `candidates` (memory indices).
    pub fn rank_indices(
        &self,
        q: &QueryVectors,
        candidates: impl IntoIterator<Item = usize>,
        k: usize,
    ) -> RetrievalResult {
        let records = &self.memory.records;
        let mut scored: Vec<(f64, usize)> = candidates
            .into_iter()
            .map(|i| (self.score(q, i), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            rank_order(a.0, &records[a.1].id, b.0, &records[b.1].id)
        };
        if k < scored.len() {
            scored.select_nth_unstable_by(k, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        RetrievalResult {
            query_id: q.id.clone(),
            ranked: scored
                .into_iter()
                .map(|(score, i)| ScoredCandidate {
                    id: records[i].id.clone(),
                    score,
                })
                .collect(),
        }
    }

    /// Exact top-`k`; with `exclude_self` the memory item sharing the query id is skipped.
    pub fn topk(
        &self,
        query: &ExampleRecord,
        query_corpus: &Corpus,
        k: usize,
        exclude_self: bool,
    ) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let q = self.query_vectors(query, query_corpus)?;
        let records = &self.memory.records;
        let candidates = (0..records.len()).filter(|&i| !(exclude_self && records[i].id == query.id));
        Ok(self.rank_indices(&q, candidates, k))
    }

    /// `topk` for every record of `queries`, in input order.
    pub fn topk_all(&self, queries: &Corpus, k: usize, exclude_self: bool) -> Result<Vec<RetrievalResult>> {
        queries
            .records
            .par_iter()
            .map(|q| self.topk(q, queries, k, exclude_self))
            .collect()
    }
}

/// Exact top-`k` search. When `query_corpus` and `memory` are the same object,
/// the query's own record is excluded.
pub fn retrieve_topk(
    query: &ExampleRecord,
    query_corpus: &Corpus,
    memory: &Corpus,
    cfg: &SimilarityConfig,
    k: usize,
) -> Result<RetrievalResult> {
    let exclude_self = std::ptr::eq(query_corpus, memory);
    Retriever::new(memory, cfg.clone())?.topk(query, query_corpus, k, exclude_self)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shortlists {
    pub results: Vec<RetrievalResult>,
    pub warnings: Vec<String>,
}

impl Shortlists {
    pub fn as_map(&self) -> BTreeMap<&str, Vec<&str>> {
        self.results
            .iter()
            .map(|r| (r.query_id.as_str(), r.ids()))
            .collect()
    }
}

/// Leave-one-out top-`n` neighbours for every record of a training corpus.
pub fn shortlist_candidates(train: &Corpus, cfg: &SimilarityConfig, n: usize) -> Result<Shortlists> {
    if n == 0 {
        return Err(Error::InvalidArgument("shortlist size must be at least 1".into()));
    }
    let mut warnings = Vec::new();
    if train.len() < n + 1 {
        let msg = format!(
            "corpus has {} records; shortlists clamped to {} candidates instead of {n}",
            train.len(),
            train.len().saturating_sub(1)
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let retriever = Retriever::new(train, cfg.clone())?;
    Ok(Shortlists {
        results: retriever.topk_all(train, n, true)?,
        warnings,
    })
}

pub fn write_results(path: &Path, results: &[RetrievalResult]) -> Result<()> {
    crate::io::write_jsonl(path, results)
}

pub fn read_results(path: &Path) -> Result<Vec<RetrievalResult>> {
    crate::io::read_jsonl(path)
}

#[cfg(test)]
mod tests;
