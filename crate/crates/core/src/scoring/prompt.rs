//! Task prompt templates.
//!
//! | task | template | scored span |
//! |------|----------|-------------|
//! | captioning | `<image> Output: [caption]` | `[caption]` |
//! | vqa | `<image> Question: [question] Short answer: [answer]` | `[answer]` |
//! | rank classification | `<image> is an image with: ‘[text]’ written on it. Is it hateful? Answer: [answer]` | `[answer]` |
//!
//! The scored span always ends the template. A rendered example is the
//! template prefix, a single space, and the target.

use crate::corpus::{ExampleRecord, Task};
use crate::error::{Error, Result};

/// Separator placed between consecutive examples of a multi-example prompt.
pub const CHUNK_SEPARATOR: &str = "<|endofchunk|>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub task: Task,
    pub template: &'static str,
    pub target_span: &'static str,
}

impl PromptTemplate {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Captioning => Self {
                task,
                template: "<image> Output: [caption]",
                target_span: "[caption]",
            },
            Task::Vqa => Self {
                task,
                template: "<image> Question: [question] Short answer: [answer]",
                target_span: "[answer]",
            },
            Task::RankClassification => Self {
                task,
                template: "<image> is an image with: \u{2018}[text]\u{2019} written on it. Is it hateful? Answer: [answer]",
                target_span: "[answer]",
            },
        }
    }

    /// Identifier sent to remote scorers.
    pub fn id(&self) -> &'static str {
        match self.task {
            Task::Captioning => "captioning",
            Task::Vqa => "vqa",
            Task::RankClassification => "rank_classification",
        }
    }

    fn input_placeholder(&self) -> Option<(&'static str, &'static str)> {
        match self.task {
            Task::Captioning => None,
            Task::Vqa => Some(("[question]", "question")),
            Task::RankClassification => Some(("[text]", "text")),
        }
    }

    /// Template text before the scored span, with inputs substituted.
    pub fn prefix(&self, record: &ExampleRecord) -> Result<String> {
        let cut = self.template.find(self.target_span).expect("target span in template");
        let mut prefix = self.template[..cut].trim_end().to_string();
        if let Some((placeholder, field)) = self.input_placeholder() {
            let value = record.text.as_deref().ok_or_else(|| self.missing(record, field))?;
            prefix = prefix.replace(placeholder, value);
        }
        Ok(prefix)
    }

    /// The text substituted for the scored span.
    pub fn target(&self, record: &ExampleRecord) -> Result<String> {
        let value = match self.task {
            Task::Captioning => record.text.clone(),
            Task::Vqa => record.answer.as_ref().and_then(|a| a.consensus()).map(str::to_string),
            Task::RankClassification => match (&record.answer, record.label) {
                (Some(a), _) => a.consensus().map(str::to_string),
                (None, Some(1)) => Some("yes".to_string()),
                (None, Some(0)) => Some("no".to_string()),
                _ => None,
            },
        };
        value.ok_or_else(|| {
            self.missing(
                record,
                match self.task {
                    Task::Captioning => "caption",
                    _ => "answer",
                },
            )
        })
    }

    fn missing(&self, record: &ExampleRecord, field: &'static str) -> Error {
        Error::MissingField {
            record: record.id.clone(),
            field,
            task: self.task.to_string(),
        }
    }
}

/// A rendered example split at the scored span.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedExample {
    pub prefix: String,
    pub target: Option<String>,
}

impl RenderedExample {
    pub fn text(&self) -> String {
        match &self.target {
            Some(t) => format!("{} {}", self.prefix, t),
            None => self.prefix.clone(),
        }
    }
}

pub fn render_example(task: Task, record: &ExampleRecord, include_target: bool) -> Result<RenderedExample> {
    let template = PromptTemplate::for_task(task);
    Ok(RenderedExample {
        prefix: template.prefix(record)?,
        target: if include_target { Some(template.target(record)?) } else { None },
    })
}

/// Renders `example`; when `query` is given, `example` becomes a complete
/// in-context example followed by the query segment. `include_target` applies
/// to the final segment, whose target is returned alongside the prompt.
pub fn render_prompt(
    task: Task,
    example: &ExampleRecord,
    query: Option<&ExampleRecord>,
    include_target: bool,
) -> Result<(String, Option<String>)> {
    match query {
        None => {
            let r = render_example(task, example, include_target)?;
            Ok((r.text(), r.target))
        }
        Some(q) => {
            let shot = render_example(task, example, true)?;
            let last = render_example(task, q, include_target)?;
            Ok((format!("{}{CHUNK_SEPARATOR}{}", shot.text(), last.text()), last.target))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Answer;

    fn record(task: Task, text: &str, answer: Option<&str>) -> ExampleRecord {
        ExampleRecord {
            id: "r".into(),
            image_key: Some("i".into()),
            text: Some(text.into()),
            answer: answer.map(|a| Answer::One(a.into())),
            label: None,
            task,
        }
    }

    #[test]
    fn captioning_golden() {
        let r = record(Task::Captioning, "a red bus", None);
        let (p, t) = render_prompt(Task::Captioning, &r, None, true).unwrap();
        assert_eq!(p, "<image> Output: a red bus");
        assert_eq!(t.as_deref(), Some("a red bus"));
        let (p, t) = render_prompt(Task::Captioning, &r, None, false).unwrap();
        assert_eq!(p, "<image> Output:");
        assert_eq!(t, None);
    }

    #[test]
    fn vqa_golden() {
        let r = record(Task::Vqa, "what color?", Some("red"));
        let (p, _) = render_prompt(Task::Vqa, &r, None, true).unwrap();
        assert_eq!(p, "<image> Question: what color? Short answer: red");
    }

    #[test]
    fn rank_classification_golden() {
        let r = record(Task::RankClassification, "t", Some("no"));
        let (p, _) = render_prompt(Task::RankClassification, &r, None, true).unwrap();
        assert_eq!(p, "<image> is an image with: \u{2018}t\u{2019} written on it. Is it hateful? Answer: no");
    }

    #[test]
    fn label_supplies_rank_answer() {
        let mut r = record(Task::RankClassification, "t", None);
        r.label = Some(1);
        let (_, t) = render_prompt(Task::RankClassification, &r, None, true).unwrap();
        assert_eq!(t.as_deref(), Some("yes"));
    }

    #[test]
    fn one_shot_scoring_layout() {
        let shot = record(Task::Captioning, "a dog", None);
        let q = record(Task::Captioning, "a cat", None);
        let (p, t) = render_prompt(Task::Captioning, &shot, Some(&q), true).unwrap();
        assert_eq!(p, "<image> Output: a dog<|endofchunk|><image> Output: a cat");
        assert_eq!(t.as_deref(), Some("a cat"));
    }

    #[test]
    fn missing_answer_is_reported() {
        let r = record(Task::Vqa, "why?", None);
        let err = render_prompt(Task::Vqa, &r, None, true).unwrap_err();
        assert!(matches!(err, Error::MissingField { field: "answer", .. }), "{err}");
        assert!(render_prompt(Task::Vqa, &r, None, false).is_ok());
    }
}
