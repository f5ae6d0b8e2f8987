//! Prompt assembly, metrics, and the evaluation studies.

mod generate;
mod metrics;
mod report;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use generate::{
    read_predictions, rank_classification_score, write_predictions, Generator, HttpGenerator, Prediction,
    PredictionRecord, SyntheticGenerator,
};
pub use metrics::{auc_roc, cider_d, cider_d_per_query, normalize_answer, tokenize, vqa_accuracy};
pub use report::{shot_sweep_report, Metric, MetricReport};

use crate::corpus::{Corpus, ExampleRecord, Task};
use crate::error::{Error, Result};
use crate::retrieval::RetrievalResult;
use crate::scoring::{render_example, CHUNK_SEPARATOR};

pub const DEFAULT_SHOT_COUNTS: [usize; 4] = [4, 8, 16, 32];

/// Order of the shots in front of the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderPolicy {
    /// Least similar first, so the most similar shot sits next to the query.
    #[default]
    Ascending,
    Descending,
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shot {
    pub example_id: String,
    pub image_ref: Option<String>,
    pub prefix: String,
    /// Empty when masked.
    pub target: String,
}

impl Shot {
    pub fn rendered(&self) -> String {
        if self.target.is_empty() {
            self.prefix.clone()
        } else {
            format!("{} {}", self.prefix, self.target)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub task: Task,
    pub query_id: String,
    pub query_image_ref: Option<String>,
    pub shots: Vec<Shot>,
    pub query_suffix: String,
}

impl PromptSet {
    /// Shots then the query segment, joined by the chunk separator.
    pub fn render(&self) -> String {
        self.shots
            .iter()
            .map(Shot::rendered)
            .chain(std::iter::once(self.query_suffix.clone()))
            .collect::<Vec<_>>()
            .join(CHUNK_SEPARATOR)
    }

    /// Image references in prompt order, ending with the query's.
    pub fn image_refs(&self) -> Vec<String> {
        self.shots
            .iter()
            .filter_map(|s| s.image_ref.clone())
            .chain(self.query_image_ref.clone())
            .collect()
    }

    /// Reorders the shots: position `i` receives the shot currently at `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.shots.len()];
        if order.len() != self.shots.len() || order.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::InvalidArgument(format!(
                "{order:?} is not a permutation of {} shots",
                self.shots.len()
            )));
        }
        let mut out = self.clone();
        out.shots = order.iter().map(|&i| self.shots[i].clone()).collect();
        Ok(out)
    }
}

fn id_seed(seed: u64, id: &str) -> u64 {
    // FNV-1a over the id, mixed with the seed
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64 ^ seed, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Builds the prompt for `query` from its retrieval result.
///
/// Takes the top `shots` candidates (clamped to what was retrieved, with a
/// warning), renders each with its target, and orders them per `policy`.
pub fn assemble_prompt_set(
    task: Task,
    query: &ExampleRecord,
    memory: &Corpus,
    retrieval: &RetrievalResult,
    shots: usize,
    policy: OrderPolicy,
) -> Result<PromptSet> {
    let n = shots.min(retrieval.ranked.len());
    if n < shots {
        log::warn!(
            "query {}: requested {shots} shots but only {} candidates were retrieved",
            query.id,
            retrieval.ranked.len()
        );
    }
    let mut chosen: Vec<Shot> = retrieval.ranked[..n]
        .iter()
        .map(|c| {
            let record = memory
                .get(&c.id)
                .ok_or_else(|| Error::InvalidArgument(format!("retrieved id {:?} is not in memory", c.id)))?;
            let r = render_example(task, record, true)?;
            Ok(Shot {
                example_id: record.id.clone(),
                image_ref: record.image_key.clone(),
                prefix: r.prefix,
                target: r.target.unwrap_or_default(),
            })
        })
        .collect::<Result<_>>()?;
    match policy {
        OrderPolicy::Descending => {}
        OrderPolicy::Ascending => chosen.reverse(),
        OrderPolicy::Random { seed } => chosen.shuffle(&mut ChaCha8Rng::seed_from_u64(id_seed(seed, &query.id))),
    }
    Ok(PromptSet {
        task,
        query_id: query.id.clone(),
        query_image_ref: query.image_key.clone(),
        shots: chosen,
        query_suffix: render_example(task, query, false)?.prefix,
    })
}

/// Empties the targets of `floor(rate * shots)` uniformly chosen shots.
pub fn mask_ablation(prompt: &PromptSet, rate: f64, seed: u64) -> Result<PromptSet> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("mask rate {rate} outside [0, 1]")));
    }
    let n = prompt.shots.len();
    let k = (rate * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(id_seed(seed, &prompt.query_id));
    let mut out = prompt.clone();
    for i in sample(&mut rng, n, k) {
        out.shots[i].target.clear();
    }
    Ok(out)
}

/// All orderings of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = vec![current.clone()];
    loop {
        let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| current[j] > current[i - 1]).expect("successor exists");
        current.swap(i - 1, j);
        current[i..].reverse();
        out.push(current.clone());
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if let Some(&first) = values.first() {
        if values.iter().all(|&v| v == first) {
            return (first, 0.0);
        }
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationReport {
    pub mode: String,
    pub orders: Vec<Vec<usize>>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Evaluates every ordering of `shots` shots with `evaluate` and summarizes.
pub fn permutation_study<F>(mode: &str, shots: usize, mut evaluate: F) -> Result<PermutationReport>
where
    F: FnMut(&[usize]) -> Result<f64>,
{
    let orders = permutations(shots);
    let values = orders.iter().map(|o| evaluate(o)).collect::<Result<Vec<f64>>>()?;
    let (mean, std) = mean_std(&values);
    Ok(PermutationReport {
        mode: mode.to_string(),
        orders,
        values,
        mean,
        std,
    })
}
