use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PromptSet;
use crate::corpus::{Answer, EmbeddingMatrix, ExampleRecord, Task};
use crate::error::Result;
use crate::scoring::{latent_nll, HttpScorer, ScorePair, Scorer};

/// Produces the model output for an assembled prompt.
pub trait Generator: Send + Sync {
    fn generate(&self, prompt: &PromptSet) -> Result<String>;
}

/// Echoes the target of the shot whose latent is closest to the query's.
///
/// Masked shots are ignored; a prompt without usable shots yields "".
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    latent: EmbeddingMatrix,
}

impl SyntheticGenerator {
    pub fn new(latent: EmbeddingMatrix) -> Self {
        Self { latent }
    }
}

impl Generator for SyntheticGenerator {
    fn generate(&self, prompt: &PromptSet) -> Result<String> {
        let mut best: Option<(f64, &str)> = None;
        for shot in prompt.shots.iter().filter(|s| !s.target.is_empty()) {
            let nll = latent_nll(&self.latent, &prompt.query_id, &shot.example_id)?;
            if best.is_none_or(|(b, _)| nll < b) {
                best = Some((nll, &shot.target));
            }
        }
        Ok(best.map(|(_, t)| t.to_string()).unwrap_or_default())
    }
}

/// Generation through a remote `/v1/generate` endpoint.
#[derive(Debug, Clone)]
pub struct HttpGenerator {
    client: HttpScorer,
}

impl HttpGenerator {
    pub fn new(client: HttpScorer) -> Self {
        Self { client }
    }
}

impl Generator for HttpGenerator {
    fn generate(&self, prompt: &PromptSet) -> Result<String> {
        self.client.generate(&prompt.render(), prompt.image_refs())
    }
}

/// Class score for rank classification: `nll("no") - nll("yes")`, each scored
/// with `shot` as the in-context example. Higher means "yes" is more likely.
pub fn rank_classification_score(scorer: &dyn Scorer, query: &ExampleRecord, shot: &ExampleRecord) -> Result<f64> {
    let with = |a: &str| ExampleRecord {
        answer: Some(Answer::One(a.into())),
        label: None,
        ..query.clone()
    };
    let (yes, no) = (with("yes"), with("no"));
    let nll = scorer.score(
        Task::RankClassification,
        &[
            ScorePair { query: &yes, candidate: shot },
            ScorePair { query: &no, candidate: shot },
        ],
    )?;
    Ok(nll[1] - nll[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prediction {
    Text(String),
    Score(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub query_id: String,
    pub output: Prediction,
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    crate::io::write_jsonl(path, records)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    crate::io::read_jsonl(path)
}
