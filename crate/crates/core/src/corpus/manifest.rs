//! JSON Lines manifests.
//!
//! The first line is a head object naming the embedding files (paths relative
//! to the manifest's directory); every following line is one [`ExampleRecord`].
//!
//! ```text
//! {"image_embeddings":"image.micl","text_embeddings":"text.micl","metadata":{"encoder":"clip-vit-l-14"}}
//! {"id":"c0","image_key":"i0","text":"a red bus","task":"captioning"}
//! ```
//!
//! A persisted corpus directory holds `manifest.jsonl` plus `image.micl` and
//! `text.micl` when the corresponding matrix exists.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Corpus, EmbeddingMatrix, ExampleRecord, Issue, Modality};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const IMAGE_FILE: &str = "image.micl";
const TEXT_FILE: &str = "text.micl";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestHead {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_embeddings: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embeddings: Option<PathBuf>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// Reads a manifest and its embedding files into a validated, un-normalized corpus.
pub fn ingest_manifest(manifest_path: &Path) -> Result<Corpus> {
    let file = File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut lines = BufReader::new(file).lines().enumerate();
    let location = |n: usize| format!("{}:{}", manifest_path.display(), n + 1);

    let head: ManifestHead = loop {
        match lines.next() {
            Some((n, line)) => {
                let line = line.map_err(|e| Error::io(manifest_path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| Error::parse(location(n), e))?;
            }
            None => return Err(Error::parse(location(0), "manifest has no head object")),
        }
    };

    let mut records = Vec::new();
    for (n, line) in lines {
        let line = line.map_err(|e| Error::io(manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ExampleRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(location(n), e))?;
        records.push(record);
    }

    let load = |p: &Option<PathBuf>, modality: Modality| -> Result<Option<EmbeddingMatrix>> {
        let Some(p) = p else { return Ok(None) };
        let m = EmbeddingMatrix::read(&base.join(p))?;
        if m.modality() != modality {
            return Err(Error::CorruptHeader {
                path: base.join(p),
                reason: format!("expected {modality} embeddings, found {}", m.modality()),
            });
        }
        Ok(Some(m))
    };
    let corpus = Corpus {
        records,
        image_embeddings: load(&head.image_embeddings, Modality::Image)?,
        text_embeddings: load(&head.text_embeddings, Modality::Text)?,
        metadata: head.metadata,
    };
    check_invariants(&corpus)?;
    Ok(corpus)
}

fn check_invariants(corpus: &Corpus) -> Result<()> {
    let mut seen = HashSet::new();
    for r in &corpus.records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::DuplicateId(r.id.clone()));
        }
    }
    for d in super::validate_corpus(corpus) {
        return Err(match d.issue {
            Issue::DanglingImageKey(key) => Error::DanglingKey {
                key,
                record: d.subject,
                modality: "image".into(),
            },
            Issue::MissingTextRow => Error::DanglingKey {
                key: d.subject.clone(),
                record: d.subject,
                modality: "text".into(),
            },
            Issue::EncoderMismatch => {
                let name = |m: &Option<EmbeddingMatrix>| {
                    m.as_ref().and_then(|m| m.encoder()).unwrap_or("<unnamed>").to_string()
                };
                Error::EncoderMismatch {
                    image: name(&corpus.image_embeddings),
                    text: name(&corpus.text_embeddings),
                }
            }
            other => Error::InvalidArgument(format!("record {:?}: {other}", d.subject)),
        });
    }
    Ok(())
}

/// Writes `corpus` as a manifest plus `MICL1` embedding files under `dir`.
pub fn persist_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let head = ManifestHead {
        image_embeddings: corpus.image_embeddings.as_ref().map(|_| PathBuf::from(IMAGE_FILE)),
        text_embeddings: corpus.text_embeddings.as_ref().map(|_| PathBuf::from(TEXT_FILE)),
        metadata: corpus.metadata.clone(),
    };
    if let Some(m) = &corpus.image_embeddings {
        m.write(&dir.join(IMAGE_FILE))?;
    }
    if let Some(m) = &corpus.text_embeddings {
        m.write(&dir.join(TEXT_FILE))?;
    }
    let mut bytes = serde_json::to_vec(&head).map_err(|e| Error::parse("manifest head", e))?;
    bytes.push(b'\n');
    bytes.extend(crate::io::to_jsonl(&corpus.records)?);
    crate::io::write_atomic(&dir.join(MANIFEST_FILE), &bytes)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    ingest_manifest(&dir.join(MANIFEST_FILE))
}
