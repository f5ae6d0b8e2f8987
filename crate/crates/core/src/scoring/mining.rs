use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ScoreRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningResult {
    pub query_id: String,
    /// Lowest NLL first.
    pub positives: Vec<String>,
    /// Highest NLL first.
    pub negatives: Vec<String>,
}

/// Splits one query's scored shortlist into `k` positives and `k` negatives.
///
/// Positives are the lowest-NLL candidates and are chosen first; negatives are
/// the highest-NLL candidates among those left, so the two sets never overlap.
/// Ties break by ascending candidate id.
pub fn mine_examples(scores: &[ScoreRecord], k: usize) -> Result<MiningResult> {
    if k == 0 {
        return Err(Error::InvalidArgument("mining K must be at least 1".into()));
    }
    let Some(first) = scores.first() else {
        return Err(Error::InvalidArgument("cannot mine an empty score list".into()));
    };
    if let Some(other) = scores.iter().find(|s| s.query_id != first.query_id) {
        return Err(Error::InvalidArgument(format!(
            "scores mix queries {:?} and {:?}",
            first.query_id, other.query_id
        )));
    }
    let by_nll = |a: &&ScoreRecord, b: &&ScoreRecord| {
        a.nll.total_cmp(&b.nll).then_with(|| a.candidate_id.cmp(&b.candidate_id))
    };
    let mut ascending: Vec<&ScoreRecord> = scores.iter().collect();
    ascending.sort_by(by_nll);
    let n_pos = k.min(ascending.len());
    let (pos, rest) = ascending.split_at(n_pos);
    let mut rest: Vec<&ScoreRecord> = rest.to_vec();
    rest.sort_by(|a, b| match b.nll.total_cmp(&a.nll) {
        Ordering::Equal => a.candidate_id.cmp(&b.candidate_id),
        o => o,
    });
    rest.truncate(k);
    Ok(MiningResult {
        query_id: first.query_id.clone(),
        positives: pos.iter().map(|s| s.candidate_id.clone()).collect(),
        negatives: rest.iter().map(|s| s.candidate_id.clone()).collect(),
    })
}

/// Mines every query present in `scores`, ordered by query id.
pub fn mine_all(scores: &[ScoreRecord], k: usize) -> Result<Vec<MiningResult>> {
    let mut grouped: BTreeMap<&str, Vec<ScoreRecord>> = BTreeMap::new();
    for s in scores {
        grouped.entry(s.query_id.as_str()).or_default().push(s.clone());
    }
    grouped.values().map(|group| mine_examples(group, k)).collect()
}
