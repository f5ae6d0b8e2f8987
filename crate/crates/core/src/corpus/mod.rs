//! Example corpora: records, their embeddings, validation and persistence.

mod embedding;
mod manifest;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use embedding::{EmbeddingMatrix, Modality, EMBEDDING_MAGIC};
pub use manifest::{ingest_manifest, load_corpus, persist_corpus, ManifestHead, MANIFEST_FILE};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Captioning,
    Vqa,
    RankClassification,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Captioning => "captioning",
            Task::Vqa => "vqa",
            Task::RankClassification => "rank_classification",
        })
    }
}

/// Ground-truth answer(s): a single string or the annotator list of a VQA item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    One(String),
    Many(Vec<String>),
}

impl Answer {
    pub fn all(&self) -> Vec<&str> {
        match self {
            Answer::One(a) => vec![a.as_str()],
            Answer::Many(v) => v.iter().map(String::as_str).collect(),
        }
    }

    /// Most frequent answer, earliest occurrence winning ties.
    pub fn consensus(&self) -> Option<&str> {
        let all = self.all();
        let mut best: Option<(&str, usize)> = None;
        for (i, a) in all.iter().enumerate() {
            if all[..i].contains(a) {
                continue;
            }
            let n = all.iter().filter(|b| *b == a).count();
            if best.is_none_or(|(_, m)| n > m) {
                best = Some((a, n));
            }
        }
        best.map(|(a, _)| a)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_key: Option<String>,
    /// Caption, question or meme text, stored verbatim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Answer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    pub task: Task,
}

impl ExampleRecord {
    pub fn captioning(id: impl Into<String>, image_key: impl Into<String>, caption: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            image_key: Some(image_key.into()),
            text: Some(caption.into()),
            answer: None,
            label: None,
            task: Task::Captioning,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub records: Vec<ExampleRecord>,
    pub image_embeddings: Option<EmbeddingMatrix>,
    pub text_embeddings: Option<EmbeddingMatrix>,
    pub metadata: BTreeMap<String, String>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ExampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn index_by_id(&self) -> std::collections::HashMap<&str, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.as_str(), i))
            .collect()
    }

    pub fn matrix(&self, modality: Modality) -> Option<&EmbeddingMatrix> {
        match modality {
            Modality::Image => self.image_embeddings.as_ref(),
            Modality::Text => self.text_embeddings.as_ref(),
        }
    }

    /// The embedding row carrying `modality` for `record`: image rows are keyed by
    /// `image_key`, text rows by record id.
    pub fn embedding(&self, record: &ExampleRecord, modality: Modality) -> Option<&[f32]> {
        match modality {
            Modality::Image => self.image_embeddings.as_ref()?.row(record.image_key.as_deref()?),
            Modality::Text => {
                record.text.as_ref()?;
                self.text_embeddings.as_ref()?.row(&record.id)
            }
        }
    }

    /// Copy of the corpus with every embedding row scaled to unit length.
    pub fn l2_normalized(&self) -> Result<Self> {
        Ok(Self {
            records: self.records.clone(),
            image_embeddings: self.image_embeddings.as_ref().map(|m| m.l2_normalize()).transpose()?,
            text_embeddings: self.text_embeddings.as_ref().map(|m| m.l2_normalize()).transpose()?,
            metadata: self.metadata.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Issue {
    DuplicateId,
    NoModality,
    MissingQuestion,
    MissingLabel,
    InvalidLabel(u8),
    DanglingImageKey(String),
    MissingTextRow,
    NonFiniteRow(Modality, String),
    EncoderMismatch,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Issue::DuplicateId => f.write_str("duplicate id"),
            Issue::NoModality => f.write_str("no modality"),
            Issue::MissingQuestion => f.write_str("vqa record without question text"),
            Issue::MissingLabel => f.write_str("rank_classification record without label"),
            Issue::InvalidLabel(l) => write!(f, "label {l} is not binary"),
            Issue::DanglingImageKey(k) => write!(f, "image_key {k:?} has no embedding row"),
            Issue::MissingTextRow => f.write_str("text has no embedding row"),
            Issue::NonFiniteRow(m, k) => write!(f, "{m} row {k:?} is not finite"),
            Issue::EncoderMismatch => f.write_str("image and text matrices name different encoders"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    /// Offending record id, or the matrix/corpus the issue belongs to.
    pub subject: String,
    pub issue: Issue,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.issue)
    }
}

/// Checks every record and matrix invariant, returning one diagnostic per violation.
pub fn validate_corpus(corpus: &Corpus) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |subject: &str, issue| {
        out.push(Diagnostic {
            subject: subject.to_string(),
            issue,
        })
    };
    let mut seen = HashSet::new();
    for r in &corpus.records {
        if !seen.insert(r.id.as_str()) {
            push(&r.id, Issue::DuplicateId);
        }
        if r.image_key.is_none() && r.text.is_none() {
            push(&r.id, Issue::NoModality);
        }
        match r.task {
            Task::Vqa if r.text.is_none() => push(&r.id, Issue::MissingQuestion),
            Task::RankClassification => match r.label {
                None => push(&r.id, Issue::MissingLabel),
                Some(l) if l > 1 => push(&r.id, Issue::InvalidLabel(l)),
                _ => {}
            },
            _ => {}
        }
        if let Some(key) = &r.image_key {
            if corpus.image_embeddings.as_ref().and_then(|m| m.index_of(key)).is_none() {
                push(&r.id, Issue::DanglingImageKey(key.clone()));
            }
        }
        if let (Some(_), Some(m)) = (&r.text, &corpus.text_embeddings) {
            if m.index_of(&r.id).is_none() {
                push(&r.id, Issue::MissingTextRow);
            }
        }
    }
    for m in [&corpus.image_embeddings, &corpus.text_embeddings].into_iter().flatten() {
        for (key, row) in m.iter() {
            if row.iter().any(|v| !v.is_finite()) {
                push(&m.modality().to_string(), Issue::NonFiniteRow(m.modality(), key.to_string()));
            }
        }
    }
    if let (Some(i), Some(t)) = (&corpus.image_embeddings, &corpus.text_embeddings) {
        if i.encoder() != t.encoder() {
            push("corpus", Issue::EncoderMismatch);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn three_record_corpus() -> Corpus {
        let records = vec![
            ExampleRecord::captioning("c0", "i0", "a red bus"),
            ExampleRecord::captioning("c1", "i1", "two dogs"),
            ExampleRecord::captioning("c2", "i2", "a kite"),
        ];
        let rows = |m| {
            EmbeddingMatrix::from_rows(
                m,
                2,
                (0..3).map(|i| {
                    let key = match m {
                        Modality::Image => format!("i{i}"),
                        Modality::Text => format!("c{i}"),
                    };
                    (key, vec![1.0, i as f32])
                }),
                Some("clip".into()),
            )
            .unwrap()
        };
        Corpus {
            records,
            image_embeddings: Some(rows(Modality::Image)),
            text_embeddings: Some(rows(Modality::Text)),
            metadata: BTreeMap::new(),
        }
    }

    #[test]
    fn valid_corpus_has_no_diagnostics() {
        assert!(validate_corpus(&three_record_corpus()).is_empty());
    }

    #[test]
    fn record_without_modalities_is_reported() {
        let mut c = three_record_corpus();
        c.records.push(ExampleRecord {
            id: "empty".into(),
            image_key: None,
            text: None,
            answer: None,
            label: None,
            task: Task::Captioning,
        });
        let d = validate_corpus(&c);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].subject, "empty");
        assert_eq!(d[0].issue.to_string(), "no modality");
    }

    #[test]
    fn vqa_without_question_is_reported() {
        let mut c = three_record_corpus();
        c.records.push(ExampleRecord {
            id: "q".into(),
            image_key: Some("i0".into()),
            text: None,
            answer: Some(Answer::One("red".into())),
            label: None,
            task: Task::Vqa,
        });
        let d = validate_corpus(&c);
        assert_eq!(d, vec![Diagnostic { subject: "q".into(), issue: Issue::MissingQuestion }]);
    }

    #[test]
    fn validation_is_pure() {
        let mut c = three_record_corpus();
        c.records[1].image_key = Some("nope".into());
        c.records.push(c.records[0].clone());
        let a = validate_corpus(&c);
        assert_eq!(a, validate_corpus(&c));
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn encoder_mismatch_is_reported() {
        let mut c = three_record_corpus();
        let t = c.text_embeddings.take().unwrap();
        c.text_embeddings = Some(
            EmbeddingMatrix::new(
                Modality::Text,
                t.dim(),
                t.keys().to_vec(),
                t.as_slice().to_vec(),
                Some("align".into()),
            )
            .unwrap(),
        );
        assert_eq!(validate_corpus(&c)[0].issue, Issue::EncoderMismatch);
    }

    #[test]
    fn consensus_answer_prefers_majority_then_first() {
        let a = Answer::Many(vec!["blue".into(), "red".into(), "red".into(), "blue".into()]);
        assert_eq!(a.consensus(), Some("blue"));
        let b = Answer::Many(vec!["x".into(), "y".into(), "y".into()]);
        assert_eq!(b.consensus(), Some("y"));
    }
}
