//! Candidate scoring and positive/negative mining.
//!
//! Each shortlisted candidate is scored as the single in-context example in
//! front of its query; the scorer reports the per-token mean NLL of the
//! query's target. Scores are cached as JSON Lines sorted by
//! `(query_id, candidate_id)`.

mod mining;
pub mod prompt;
mod scorer;

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

pub use mining::{mine_all, mine_examples, MiningResult};
pub use prompt::{render_example, render_prompt, PromptTemplate, RenderedExample, CHUNK_SEPARATOR};
pub use scorer::{
    decode_scores, latent_nll, synthetic_score, CandidatePayload, GenerateRequest, GenerateResponse, HttpScorer,
    NllReduction, QueryPayload, ScoreEntry, ScoreItem, ScorePair, ScoreRequest, ScoreResponse, Scorer,
    SyntheticScorer,
};

use crate::corpus::{Corpus, Task};
use crate::error::{Error, Result};
use crate::retrieval::RetrievalResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub query_id: String,
    pub candidate_id: String,
    pub nll: f64,
}

#[derive(Debug, Clone)]
pub struct ScoringOptions {
    pub cache: Option<PathBuf>,
    /// Upper bound on concurrently outstanding scorer requests.
    pub max_in_flight: usize,
    /// Pairs per scorer request.
    pub batch_size: usize,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            cache: None,
            max_in_flight: 4,
            batch_size: 16,
        }
    }
}

type PairKey = (String, String);

/// Reads a score cache; later lines override earlier ones for the same pair.
pub fn read_cache(path: &Path) -> Result<BTreeMap<PairKey, f64>> {
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let records: Vec<ScoreRecord> = crate::io::read_jsonl(path)?;
    Ok(records
        .into_iter()
        .map(|r| ((r.query_id, r.candidate_id), r.nll))
        .collect())
}

fn to_records(map: &BTreeMap<PairKey, f64>) -> Vec<ScoreRecord> {
    map.iter()
        .map(|((q, c), nll)| ScoreRecord {
            query_id: q.clone(),
            candidate_id: c.clone(),
            nll: *nll,
        })
        .collect()
}

/// Scores every `(query, shortlisted candidate)` pair.
///
/// Cached pairs are never re-requested. Uncached pairs are sent in batches by
/// up to `max_in_flight` workers; completed batches are appended to the cache
/// by the calling thread, which finally rewrites the cache sorted. The output
/// is sorted by `(query_id, candidate_id)` regardless of completion order.
pub fn score_candidates(
    task: Task,
    queries: &Corpus,
    memory: &Corpus,
    shortlists: &[RetrievalResult],
    scorer: &dyn Scorer,
    opts: &ScoringOptions,
) -> Result<Vec<ScoreRecord>> {
    let query_index = queries.index_by_id();
    let memory_index = memory.index_by_id();
    let lookup = |index: &HashMap<&str, usize>, id: &str| -> Result<usize> {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown record id {id:?} in shortlist")))
    };

    let mut requested: BTreeMap<PairKey, (usize, usize)> = BTreeMap::new();
    for s in shortlists {
        let qi = lookup(&query_index, &s.query_id)?;
        for c in &s.ranked {
            let ci = lookup(&memory_index, &c.id)?;
            requested.insert((s.query_id.clone(), c.id.clone()), (qi, ci));
        }
    }

    let mut cache = match &opts.cache {
        Some(p) => read_cache(p)?,
        None => BTreeMap::new(),
    };
    let missing: Vec<(&PairKey, (usize, usize))> = requested
        .iter()
        .filter(|(k, _)| !cache.contains_key(*k))
        .map(|(k, v)| (k, *v))
        .collect();

    if !missing.is_empty() {
        let batches: Vec<&[(&PairKey, (usize, usize))]> = missing.chunks(opts.batch_size.max(1)).collect();
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let (tx, rx) = mpsc::channel::<(usize, Result<Vec<f64>>)>();
        let workers = opts.max_in_flight.max(1).min(batches.len());

        let mut appender = match &opts.cache {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                Some(OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?)
            }
            None => None,
        };

        let mut failures: Vec<(usize, Error)> = Vec::new();
        std::thread::scope(|scope| -> Result<()> {
            for _ in 0..workers {
                let tx = tx.clone();
                let (next, abort, batches) = (&next, &abort, &batches);
                scope.spawn(move || loop {
                    if abort.load(Ordering::Relaxed) {
                        break;
                    }
                    let b = next.fetch_add(1, Ordering::Relaxed);
                    let Some(batch) = batches.get(b) else { break };
                    let pairs: Vec<ScorePair<'_>> = batch
                        .iter()
                        .map(|(_, (qi, ci))| ScorePair {
                            query: &queries.records[*qi],
                            candidate: &memory.records[*ci],
                        })
                        .collect();
                    let result = scorer.score(task, &pairs).and_then(|v| {
                        if v.len() == pairs.len() {
                            Ok(v)
                        } else {
                            Err(Error::MalformedResponse(format!("expected {} scores, got {}", pairs.len(), v.len())))
                        }
                    });
                    if result.is_err() {
                        abort.store(true, Ordering::Relaxed);
                    }
                    if tx.send((b, result)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);
            for (b, result) in rx {
                match result {
                    Ok(nlls) => {
                        let fresh: Vec<ScoreRecord> = batches[b]
                            .iter()
                            .zip(nlls)
                            .map(|((key, _), nll)| ScoreRecord {
                                query_id: key.0.clone(),
                                candidate_id: key.1.clone(),
                                nll,
                            })
                            .collect();
                        if let (Some(f), Some(p)) = (appender.as_mut(), &opts.cache) {
                            f.write_all(&crate::io::to_jsonl(&fresh)?).map_err(|e| Error::io(p, e))?;
                        }
                        for r in fresh {
                            cache.insert((r.query_id, r.candidate_id), r.nll);
                        }
                    }
                    Err(e) => failures.push((b, e)),
                }
            }
            Ok(())
        })?;
        if let Some(p) = &opts.cache {
            crate::io::write_jsonl(p, &to_records(&cache))?;
        }
        if let Some((_, e)) = failures.into_iter().min_by_key(|(b, _)| *b) {
            return Err(e);
        }
    }

    let out: BTreeMap<PairKey, f64> = requested
        .keys()
        .map(|k| (k.clone(), cache[k]))
        .collect();
    let records = to_records(&out);
    for r in &records {
        if !r.nll.is_finite() || r.nll < 0.0 {
            return Err(Error::MalformedResponse(format!(
                "nll {} for ({}, {}) is not a finite non-negative value",
                r.nll, r.query_id, r.candidate_id
            )));
        }
    }
    Ok(records)
}
