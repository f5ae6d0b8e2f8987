//! Retrieval of multimodal in-context examples for prompting frozen
//! multimodal language models.
//!
//! The crate covers the whole selection pipeline:
//!
//! - [`corpus`]: example records, `MICL1` embedding files, manifests.
//! - [`retrieval`]: fused cosine similarity, exact top-k search, shortlists and
//!   the two-stage visual-then-text retriever.
//! - [`scoring`]: prompt templates, NLL scorers (HTTP, cached, synthetic) and
//!   positive/negative mining.
//! - [`trainer`]: projection adapters trained with an in-batch contrastive loss,
//!   AdamW and a warmup/cosine schedule.
//! - [`eval`]: prompt assembly, CIDEr-D, VQA accuracy, AUC-ROC and ablations.
//! - [`pipeline`]: the staged, hash-checked driver behind the `micl` binary.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod io;
pub mod pipeline;
pub mod retrieval;
pub mod scoring;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
