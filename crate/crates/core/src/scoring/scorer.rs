use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::prompt::PromptTemplate;
use crate::corpus::{EmbeddingMatrix, ExampleRecord, Task};
use crate::error::{Error, Result};

/// A query and one candidate in-context example to be scored together.
#[derive(Debug, Clone, Copy)]
pub struct ScorePair<'a> {
    pub query: &'a ExampleRecord,
    pub candidate: &'a ExampleRecord,
}

/// Produces the per-token mean NLL of the query target when the candidate is
/// the single in-context example. Lower is more helpful.
pub trait Scorer: Send + Sync {
    fn score(&self, task: Task, pairs: &[ScorePair<'_>]) -> Result<Vec<f64>>;
}

/// `1 - cos(latent_query, latent_candidate)`, clamped into `[0, 2]`.
pub fn synthetic_score(query: &ExampleRecord, candidate: &ExampleRecord, latent: &EmbeddingMatrix) -> Result<f64> {
    latent_nll(latent, &query.id, &candidate.id)
}

/// [`synthetic_score`] addressed by record id.
pub fn latent_nll(latent: &EmbeddingMatrix, query_id: &str, candidate_id: &str) -> Result<f64> {
    let row = |id: &str| {
        latent.row(id).ok_or_else(|| Error::UnresolvedModality {
            record: id.to_string(),
            modality: "latent".into(),
        })
    };
    let (a, b) = (row(query_id)?, row(candidate_id)?);
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    let cos = ab / (aa * bb).sqrt();
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

/// Deterministic stand-in for an MLLM scorer backed by a latent matrix.
#[derive(Debug, Clone)]
pub struct SyntheticScorer {
    latent: EmbeddingMatrix,
}

impl SyntheticScorer {
    pub fn new(latent: EmbeddingMatrix) -> Self {
        Self { latent }
    }

    pub fn latent(&self) -> &EmbeddingMatrix {
        &self.latent
    }
}

impl Scorer for SyntheticScorer {
    fn score(&self, _task: Task, pairs: &[ScorePair<'_>]) -> Result<Vec<f64>> {
        pairs
            .iter()
            .map(|p| synthetic_score(p.query, p.candidate, &self.latent))
            .collect()
    }
}

// Wire protocol

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPayload {
    pub image_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Target the scorer evaluates when the query text is an input (vqa, memes).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePayload {
    pub image_ref: Option<String>,
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreItem {
    pub query: QueryPayload,
    pub candidate: CandidatePayload,
    pub template_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub task: Task,
    pub items: Vec<ScoreItem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NllReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub nll: f64,
    pub token_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub scores: Vec<ScoreEntry>,
    /// Absent means per-token mean.
    #[serde(default)]
    pub reduction: NllReduction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub completion: String,
}

impl ScoreItem {
    pub fn from_pair(task: Task, pair: &ScorePair<'_>) -> Self {
        let template = PromptTemplate::for_task(task);
        let target = |r: &ExampleRecord| template.target(r).ok();
        let (query_text, query_answer) = match task {
            Task::Captioning => (None, pair.query.text.clone()),
            _ => (pair.query.text.clone(), target(pair.query)),
        };
        let (cand_text, cand_answer) = match task {
            Task::Captioning => (pair.candidate.text.clone(), None),
            _ => (pair.candidate.text.clone(), target(pair.candidate)),
        };
        Self {
            query: QueryPayload {
                image_ref: pair.query.image_key.clone(),
                text: query_text,
                answer: query_answer,
            },
            candidate: CandidatePayload {
                image_ref: pair.candidate.image_key.clone(),
                text: cand_text,
                answer: cand_answer,
            },
            template_id: template.id().to_string(),
        }
    }
}

/// Converts a response into per-pair mean NLLs, validating shape and values.
pub fn decode_scores(response: &ScoreResponse, expected: usize) -> Result<Vec<f64>> {
    if response.scores.len() != expected {
        return Err(Error::MalformedResponse(format!(
            "expected {expected} scores, got {}",
            response.scores.len()
        )));
    }
    response
        .scores
        .iter()
        .map(|s| {
            let nll = match response.reduction {
                NllReduction::Mean => s.nll,
                NllReduction::Sum if s.token_count > 0 => s.nll / f64::from(s.token_count),
                NllReduction::Sum => {
                    return Err(Error::MalformedResponse("sum-reduced score with zero tokens".into()))
                }
            };
            if !nll.is_finite() || nll < 0.0 {
                return Err(Error::MalformedResponse(format!("nll {nll} is not a finite non-negative value")));
            }
            Ok(nll)
        })
        .collect()
}

/// Client for a remote scorer host exposing `/v1/score` and `/v1/generate`.
#[derive(Debug, Clone)]
pub struct HttpScorer {
    base_url: String,
    agent: ureq::Agent,
    attempts: u32,
    backoff: Duration,
}

impl HttpScorer {
    pub fn new(base_url: impl Into<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(600)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent,
            attempts: 3,
            backoff: Duration::from_millis(500),
        }
    }

    /// Delay before the first retry; doubles on each further attempt.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn with_attempts(mut self, attempts: u32) -> Self {
        self.attempts = attempts.max(1);
        self
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn post<Req: Serialize, Resp: serde::de::DeserializeOwned>(&self, path: &str, body: &Req) -> std::result::Result<Resp, (u32, String)> {
        let url = format!("{}{path}", self.base_url);
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 1..=self.attempts {
            match self.agent.post(&url).send_json(body) {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status == 200 {
                        return resp
                            .body_mut()
                            .read_json::<Resp>()
                            .map_err(|e| (attempt, format!("malformed response body: {e}")));
                    }
                    last = format!("HTTP {status}");
                    if !(status >= 500 || status == 429) {
                        return Err((attempt, last));
                    }
                }
                Err(e) => last = e.to_string(),
            }
            if attempt < self.attempts {
                log::warn!("{url}: attempt {attempt} failed ({last}); retrying in {delay:?}");
                thread::sleep(delay);
                delay *= 2;
            }
        }
        Err((self.attempts, last))
    }

    pub fn generate(&self, prompt: &str, image_refs: Vec<String>) -> Result<String> {
        let req = GenerateRequest {
            prompt: prompt.to_string(),
            image_refs,
        };
        self.post::<_, GenerateResponse>("/v1/generate", &req)
            .map(|r| r.completion)
            .map_err(|(attempts, message)| Error::ScorerTransport {
                query_id: "<generate>".into(),
                candidate_id: "-".into(),
                attempts,
                message,
            })
    }
}

impl Scorer for HttpScorer {
    fn score(&self, task: Task, pairs: &[ScorePair<'_>]) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let req = ScoreRequest {
            task,
            items: pairs.iter().map(|p| ScoreItem::from_pair(task, p)).collect(),
        };
        let resp: ScoreResponse = self.post("/v1/score", &req).map_err(|(attempts, message)| {
            if message.starts_with("malformed") {
                Error::MalformedResponse(message)
            } else {
                Error::ScorerTransport {
                    query_id: pairs[0].query.id.clone(),
                    candidate_id: pairs[0].candidate.id.clone(),
                    attempts,
                    message,
                }
            }
        })?;
        decode_scores(&resp, pairs.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Modality;

    fn latent(rows: &[(&str, Vec<f32>)]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(
            Modality::Text,
            rows[0].1.len(),
            rows.iter().map(|(k, v)| (k.to_string(), v.clone())),
            None,
        )
        .unwrap()
    }

    fn rec(id: &str) -> ExampleRecord {
        ExampleRecord::captioning(id, id, "x")
    }

    #[test]
    fn self_score_is_zero_and_antipode_is_two() {
        let l = latent(&[("a", vec![0.6, 0.8]), ("b", vec![-0.6, -0.8])]);
        assert_eq!(synthetic_score(&rec("a"), &rec("a"), &l).unwrap(), 0.0);
        assert!((synthetic_score(&rec("a"), &rec("b"), &l).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn missing_latent_row_is_an_error() {
        let l = latent(&[("a", vec![1.0, 0.0])]);
        assert!(synthetic_score(&rec("a"), &rec("zzz"), &l).is_err());
    }

    #[test]
    fn sum_reduction_is_converted_to_mean() {
        let resp = ScoreResponse {
            scores: vec![ScoreEntry { nll: 6.0, token_count: 3 }],
            reduction: NllReduction::Sum,
        };
        assert_eq!(decode_scores(&resp, 1).unwrap(), vec![2.0]);
    }

    #[test]
    fn wrong_count_and_negative_nll_are_malformed() {
        let resp = ScoreResponse {
            scores: vec![ScoreEntry { nll: -1.0, token_count: 3 }],
            reduction: NllReduction::Mean,
        };
        assert!(matches!(decode_scores(&resp, 2), Err(Error::MalformedResponse(_))));
        assert!(matches!(decode_scores(&resp, 1), Err(Error::MalformedResponse(_))));
    }

    #[test]
    fn score_request_wire_shape() {
        let q = ExampleRecord::captioning("q", "img-q", "a cat");
        let c = ExampleRecord::captioning("c", "img-c", "a dog");
        let req = ScoreRequest {
            task: Task::Captioning,
            items: vec![ScoreItem::from_pair(Task::Captioning, &ScorePair { query: &q, candidate: &c })],
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"task":"captioning","items":[{"query":{"image_ref":"img-q","answer":"a cat"},"candidate":{"image_ref":"img-c","text":"a dog"},"template_id":"captioning"}]}"#
        );
    }
}
