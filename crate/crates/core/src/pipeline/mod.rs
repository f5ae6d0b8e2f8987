//! Staged driver: ingest, retrieve, score, mine, train, eval, report.
//!
//! Stages communicate only through files in the working directory. Each
//! completed stage records a [`StageMeta`] with the hash of the configuration
//! it ran under and the hashes of its inputs and outputs. A stage is skipped
//! when that record still matches; a stage whose upstream record no longer
//! matches the configuration or the files on disk refuses to run.

mod config;
mod provenance;
mod stages;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::json;

pub use config::{
    apply_override, parse_override, ConfigDiagnostic, DataConfig, EvalConfig, EvalMode, GeneratorKind, Paths,
    PipelineConfig, RetrievalConfig, ScorerConfig, ScorerKind, Severity, SCORER_URL_ENV,
};
pub use provenance::{meta_path, read_meta, StageMeta, WorkLock, LOCK_FILE, META_DIR};
pub use stages::{task_metric, Cell, TrainLog};

use crate::error::{Error, Result};
use crate::io::json_hash;
use provenance::{artifact_name, first_mismatch, hash_artifacts, write_meta};
use stages::Layout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Retrieve,
    Score,
    Mine,
    Train,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Retrieve,
        Stage::Score,
        Stage::Mine,
        Stage::Train,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Retrieve => "retrieve",
            Stage::Score => "score",
            Stage::Mine => "mine",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn dependencies(self, cfg: &PipelineConfig) -> Vec<Stage> {
        match self {
            Stage::Ingest => vec![],
            Stage::Retrieve => vec![Stage::Ingest],
            Stage::Score => vec![Stage::Ingest, Stage::Retrieve],
            Stage::Mine => vec![Stage::Score],
            Stage::Train => vec![Stage::Ingest, Stage::Score, Stage::Mine],
            Stage::Eval => {
                let mut d = vec![Stage::Ingest];
                if cfg.eval.modes.iter().any(|m| m == "MSIER") {
                    d.push(Stage::Train);
                }
                d
            }
            Stage::Report => vec![Stage::Eval],
        }
    }

    fn artifact(self) -> &'static str {
        match self {
            Stage::Ingest => "the ingested corpora",
            Stage::Retrieve => "the candidate shortlists",
            Stage::Score => "the score cache",
            Stage::Mine => "the mined positives/negatives",
            Stage::Train => "the adapter checkpoint",
            Stage::Eval => "the evaluation results",
            Stage::Report => "the report",
        }
    }

    /// Hash of the configuration fields this stage's outputs depend on.
    pub fn config_hash(self, cfg: &PipelineConfig) -> String {
        let r = &cfg.retrieval;
        let v = match self {
            Stage::Ingest => json!({"task": cfg.task, "data": cfg.data}),
            Stage::Retrieve => json!({"mode": r.mode, "pairs": r.pairs, "n": r.shortlist_n}),
            Stage::Score => json!({"task": cfg.task, "kind": cfg.scorer.kind, "endpoint": cfg.scorer.endpoint}),
            Stage::Mine => json!({"k": cfg.train.k}),
            Stage::Train => json!({"train": cfg.effective_train(), "mode": r.mode, "pairs": r.pairs}),
            Stage::Eval => json!({
                "task": cfg.task,
                "eval": cfg.eval,
                "seed": cfg.seed,
                "mode": r.mode,
                "pairs": r.pairs,
                "mmices_n_visual": r.mmices_n_visual,
                "scorer": {"kind": cfg.scorer.kind, "endpoint": cfg.scorer.endpoint},
            }),
            Stage::Report => json!({
                "task": cfg.task,
                "modes": cfg.eval.modes,
                "shots": cfg.eval.shot_counts,
                "seed": cfg.seed,
                "mode": r.mode,
            }),
        };
        json_hash(&v)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Rerun stages even when their provenance still matches.
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub status: StageStatus,
}

/// Checks a config file; unreadable or unparsable files yield one error diagnostic.
pub fn validate_config(path: &Path, overrides: &[(String, serde_json::Value)]) -> Vec<ConfigDiagnostic> {
    match PipelineConfig::load(path, overrides) {
        Ok(cfg) => cfg.validate(),
        Err(e) => vec![ConfigDiagnostic {
            severity: Severity::Error,
            key: "<file>".into(),
            message: e.to_string(),
        }],
    }
}

fn ancestors(stage: Stage, cfg: &PipelineConfig) -> Vec<Stage> {
    let mut seen = Vec::new();
    let mut stack = stage.dependencies(cfg);
    while let Some(s) = stack.pop() {
        if !seen.contains(&s) {
            seen.push(s);
            stack.extend(s.dependencies(cfg));
        }
    }
    seen.sort();
    seen
}

/// Files outside the working directory a stage reads.
fn external_inputs(stage: Stage, cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    match stage {
        Stage::Ingest => {
            if let DataConfig::Manifest { train, eval, latent } = &cfg.data {
                out.extend([train, eval].into_iter().chain(latent).map(|p| cfg.resolve(p)));
            }
        }
        Stage::Eval if cfg.eval.generator == GeneratorKind::Offline => {
            if let Some(dir) = &cfg.eval.predictions_dir {
                let dir = cfg.resolve(dir);
                let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
                out.extend(entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()));
                out.sort();
            }
        }
        _ => {}
    }
    Ok(out)
}

fn expected_inputs(
    stage: Stage,
    cfg: &PipelineConfig,
    work: &Path,
    metas: &BTreeMap<Stage, StageMeta>,
) -> Result<BTreeMap<String, String>> {
    let mut inputs: BTreeMap<String, String> = stage
        .dependencies(cfg)
        .iter()
        .filter_map(|d| metas.get(d))
        .flat_map(|m| m.outputs.clone())
        .collect();
    inputs.extend(hash_artifacts(work, &external_inputs(stage, cfg)?)?);
    Ok(inputs)
}

/// Verifies that every upstream stage completed under the current configuration
/// and that its files are unchanged. Returns the upstream records.
fn check_upstream(stage: Stage, cfg: &PipelineConfig, work: &Path) -> Result<BTreeMap<Stage, StageMeta>> {
    let mut metas = BTreeMap::new();
    for a in ancestors(stage, cfg) {
        let meta = read_meta(work, a.name())?.ok_or_else(|| Error::MissingInput {
            stage: stage.to_string(),
            producer: a.to_string(),
            artifact: a.artifact().to_string(),
        })?;
        let stale = |artifact: String, reason: String| Error::StaleArtifact {
            producer: a.to_string(),
            artifact,
            reason,
        };
        if meta.config_hash != a.config_hash(cfg) {
            return Err(stale(a.artifact().into(), "the configuration changed since it was produced".into()));
        }
        if let Some((name, reason)) = first_mismatch(work, &meta.outputs) {
            return Err(stale(name, reason));
        }
        if meta.inputs != expected_inputs(a, cfg, work, &metas)? {
            return Err(stale(a.artifact().into(), "its inputs changed after it ran".into()));
        }
        metas.insert(a, meta);
    }
    Ok(metas)
}

fn run_stage(stage: Stage, cfg: &PipelineConfig, work: &Path, opts: RunOptions) -> Result<StageStatus> {
    let metas = check_upstream(stage, cfg, work)?;
    let inputs = expected_inputs(stage, cfg, work, &metas)?;
    let hash = stage.config_hash(cfg);
    if !opts.force {
        if let Some(own) = read_meta(work, stage.name())? {
            if own.config_hash == hash && own.inputs == inputs && first_mismatch(work, &own.outputs).is_none() {
                log::info!("stage {stage}: up to date, skipped");
                return Ok(StageStatus::Skipped);
            }
        }
    }
    log::info!("stage {stage}: running");
    let layout = Layout { work: work.to_path_buf() };
    let outputs = match stage {
        Stage::Ingest => stages::ingest(cfg, &layout),
        Stage::Retrieve => stages::retrieve(cfg, &layout),
        Stage::Score => stages::score(cfg, &layout, &hash),
        Stage::Mine => stages::mine(cfg, &layout),
        Stage::Train => stages::train(cfg, &layout, &hash),
        Stage::Eval => stages::eval(cfg, &layout),
        Stage::Report => stages::report(cfg, &layout, &hash),
    }
    .map_err(|e| Error::Stage {
        stage: stage.to_string(),
        source: Box::new(e),
    })?;
    let meta = StageMeta {
        stage: stage.to_string(),
        config_hash: hash,
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        inputs,
        outputs: hash_artifacts(work, &outputs)?,
    };
    write_meta(work, &meta)?;
    log::debug!(
        "stage {stage}: wrote {}",
        outputs.iter().map(|p| artifact_name(work, p)).collect::<Vec<_>>().join(", ")
    );
    Ok(StageStatus::Ran)
}

/// Runs `stages` in order under the working-directory lock.
pub fn run(cfg: &PipelineConfig, stages: &[Stage], opts: RunOptions) -> Result<Vec<StageOutcome>> {
    let diagnostics = cfg.validate();
    if !PipelineConfig::is_runnable(&diagnostics) {
        let list: Vec<String> = diagnostics
            .iter()
            .filter(|d| d.severity == Severity::Error)
            .map(|d| d.to_string())
            .collect();
        return Err(Error::Config(list.join("; ")));
    }
    for d in &diagnostics {
        log::warn!("{d}");
    }
    let work = cfg.work_dir();
    let names: Vec<&str> = stages.iter().map(|s| s.name()).collect();
    let _lock = WorkLock::acquire(&work, &format!("run {}", names.join(",")))?;
    let mut out = Vec::new();
    for &stage in stages {
        let status = run_stage(stage, cfg, &work, opts)?;
        out.push(StageOutcome { stage, status });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
