use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scoring::MiningResult;

/// One query with the positive and negative drawn for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchItem {
    pub query: String,
    pub positive: String,
    pub negative: String,
}

/// Draws one positive and one negative uniformly and independently per query.
pub fn sample_batch(rng: &mut ChaCha8Rng, queries: &[&MiningResult]) -> Vec<BatchItem> {
    queries
        .iter()
        .map(|m| {
            let positive = m.positives[rng.gen_range(0..m.positives.len())].clone();
            let negative = m.negatives[rng.gen_range(0..m.negatives.len())].clone();
            BatchItem {
                query: m.query_id.clone(),
                positive,
                negative,
            }
        })
        .collect()
}

/// Epoch-wise batching over mined queries.
///
/// Each epoch visits every usable query once, in a fresh seeded order.
#[derive(Debug)]
pub struct BatchSampler<'a> {
    usable: Vec<&'a MiningResult>,
    skipped: Vec<String>,
    batch_size: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(mining: &'a [MiningResult], batch_size: usize) -> Self {
        let (usable, skipped): (Vec<&MiningResult>, Vec<&MiningResult>) = mining
            .iter()
            .partition(|m| !m.positives.is_empty() && !m.negatives.is_empty());
        for m in &skipped {
            log::warn!("query {} has no mined positive or negative; skipped in training", m.query_id);
        }
        Self {
            usable,
            skipped: skipped.into_iter().map(|m| m.query_id.clone()).collect(),
            batch_size: batch_size.max(1),
        }
    }

    /// Ids of queries excluded for lack of positives or negatives.
    pub fn skipped(&self) -> &[String] {
        &self.skipped
    }

    pub fn usable(&self) -> usize {
        self.usable.len()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.usable.len().div_ceil(self.batch_size)
    }

    pub fn epoch(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<BatchItem>> {
        let mut order = self.usable.clone();
        order.shuffle(rng);
        order.chunks(self.batch_size).map(|c| sample_batch(rng, c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn mined(id: &str, k: usize) -> MiningResult {
        MiningResult {
            query_id: id.into(),
            positives: (0..k).map(|i| format!("{id}p{i}")).collect(),
            negatives: (0..k).map(|i| format!("{id}n{i}")).collect(),
        }
    }

    #[test]
    fn singleton_support_is_deterministic() {
        let m = mined("q", 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let b = sample_batch(&mut rng, &[&m]);
            assert_eq!((b[0].positive.as_str(), b[0].negative.as_str()), ("qp0", "qn0"));
        }
    }

    #[test]
    fn same_seed_same_batches() {
        let all: Vec<MiningResult> = (0..37).map(|i| mined(&format!("q{i}"), 5)).collect();
        let s = BatchSampler::new(&all, 8);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..3).map(|_| s.epoch(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn epoch_visits_each_query_once() {
        let all: Vec<MiningResult> = (0..37).map(|i| mined(&format!("q{i}"), 2)).collect();
        let s = BatchSampler::new(&all, 8);
        let batches = s.epoch(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(batches.len(), 5);
        assert_eq!(s.steps_per_epoch(), 5);
        let mut seen: Vec<&str> = batches.iter().flatten().map(|b| b.query.as_str()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 37);
    }

    #[test]
    fn empty_sets_are_skipped() {
        let mut bad = mined("z", 3);
        bad.negatives.clear();
        let all = vec![mined("a", 3), bad];
        let s = BatchSampler::new(&all, 4);
        assert_eq!(s.skipped(), ["z".to_string()]);
        assert_eq!(s.usable(), 1);
    }

    #[test]
    fn positive_frequencies_are_uniform() {
        let m = mined("q", 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            let b = sample_batch(&mut rng, &[&m]);
            counts[b[0].positive[2..].parse::<usize>().unwrap()] += 1;
        }
        let sigma = (0.2f64 * 0.8 / draws as f64).sqrt();
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 0.2).abs() <= 3.0 * sigma, "frequency {f}");
        }
    }
}
