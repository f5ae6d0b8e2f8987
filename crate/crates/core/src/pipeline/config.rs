use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::Task;
use crate::error::{Error, Result};
use crate::eval::{OrderPolicy, DEFAULT_SHOT_COUNTS};
use crate::retrieval::{PairWeight, SimilarityConfig, SimilarityMode};
use crate::synthetic::SyntheticSpec;
use crate::trainer::TrainConfig;

/// Environment variable that replaces `scorer.endpoint`.
pub const SCORER_URL_ENV: &str = "MICL_SCORER_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Drives training, random shot orders and masking.
    pub seed: u64,
    pub task: Task,
    pub paths: Paths,
    pub data: DataConfig,
    pub retrieval: RetrievalConfig,
    pub scorer: ScorerConfig,
    /// `train.k` is the mining K; `train.seed` is replaced by `seed`.
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Directory relative paths resolve against; the config file's directory.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::Captioning,
            paths: Paths::default(),
            data: DataConfig::default(),
            retrieval: RetrievalConfig::default(),
            scorer: ScorerConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub work_dir: PathBuf,
    /// Defaults to `<work_dir>/scores.jsonl`.
    pub score_cache: Option<PathBuf>,
    /// Defaults to `<work_dir>/adapter.ckpt`.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `<work_dir>`.
    pub reports: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            work_dir: PathBuf::from("work"),
            score_cache: None,
            checkpoint: None,
            reports: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated memory/query corpora plus their latent matrix.
    Synthetic(SyntheticSpec),
    Manifest {
        /// Memory corpus; also the training corpus.
        train: PathBuf,
        /// Held-out queries.
        eval: PathBuf,
        /// Latent matrix for the synthetic scorer or generator.
        #[serde(default)]
        latent: Option<PathBuf>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub mode: SimilarityMode,
    /// Used when `mode` is `custom`.
    pub pairs: Vec<PairWeight>,
    pub shortlist_n: usize,
    /// Visual shortlist size of the two-stage retriever.
    pub mmices_n_visual: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            mode: SimilarityMode::Qimit,
            pairs: Vec::new(),
            shortlist_n: 50,
            mmices_n_visual: 50,
        }
    }
}

impl RetrievalConfig {
    pub fn similarity(&self) -> SimilarityConfig {
        match self.mode {
            SimilarityMode::Custom => SimilarityConfig::custom(self.pairs.clone()),
            m => SimilarityConfig::new(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Synthetic,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    pub endpoint: Option<String>,
    pub max_in_flight: usize,
    pub batch_size: usize,
    pub attempts: u32,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            kind: ScorerKind::Synthetic,
            endpoint: None,
            max_in_flight: 4,
            batch_size: 16,
            attempts: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Synthetic,
    Http,
    /// Read `<predictions_dir>/<mode>_<shots>.jsonl`.
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Retriever modes: QIMI, QTMT, QIMIT, QITMIT, MMICES or MSIER (trained adapter).
    pub modes: Vec<String>,
    pub shot_counts: Vec<usize>,
    pub order: OrderPolicy,
    /// Fraction of shot captions masked; 0 disables.
    pub mask_rate: f64,
    /// Evaluate all orders of 3 shots per mode.
    pub permutation_study: bool,
    pub generator: GeneratorKind,
    pub predictions_dir: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            modes: vec!["QIMI".into(), "QIMIT".into(), "MSIER".into()],
            shot_counts: DEFAULT_SHOT_COUNTS.to_vec(),
            order: OrderPolicy::Ascending,
            mask_rate: 0.0,
            permutation_study: false,
            generator: GeneratorKind::Synthetic,
            predictions_dir: None,
        }
    }
}

/// A retriever evaluated by the eval stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Unsupervised(SimilarityMode),
    Mmices,
    /// The configured retrieval pairs with the trained adapter.
    Msier,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "QIMI" => EvalMode::Unsupervised(SimilarityMode::Qimi),
            "QTMT" => EvalMode::Unsupervised(SimilarityMode::Qtmt),
            "QIMIT" => EvalMode::Unsupervised(SimilarityMode::Qimit),
            "QITMIT" => EvalMode::Unsupervised(SimilarityMode::Qitmit),
            "MMICES" => EvalMode::Mmices,
            "MSIER" => EvalMode::Msier,
            other => return Err(Error::Config(format!("unknown eval mode {other:?}"))),
        })
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalMode::Unsupervised(m) => write!(f, "{m}"),
            EvalMode::Mmices => f.write_str("MMICES"),
            EvalMode::Msier => f.write_str("MSIER"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfigDiagnostic {
    pub severity: Severity,
    /// Dotted key the diagnostic refers to.
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{s}: {}: {}", self.key, self.message)
    }
}

/// Sets `key` (dotted path) in `root`. Every key on the path must already exist.
pub fn apply_override(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::Config(format!(
                "override {key:?}: {:?} is not an object",
                parts[..i].join(".")
            )));
        };
        // externally tagged enums may switch variant at the last step
        let slot = if i + 1 == parts.len() && map.len() == 1 && !map.contains_key(*part) && value.is_object() {
            map.clear();
            map.entry(part.to_string()).or_insert(Value::Null)
        } else {
            map.get_mut(*part)
                .ok_or_else(|| Error::Config(format!("override {key:?}: unknown key {part:?}")))?
        };
        node = slot;
    }
    *node = value;
    Ok(())
}

/// Splits `key=value`; the value is JSON when it parses as JSON, a string otherwise.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl PipelineConfig {
    /// Parses `text` (missing keys take defaults) and applies `overrides` in order.
    pub fn from_json(text: &str, overrides: &[(String, Value)]) -> Result<Self> {
        let parsed: PipelineConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if overrides.is_empty() {
            return Ok(parsed);
        }
        let mut value = serde_json::to_value(&parsed).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            apply_override(&mut value, k, v.clone())?;
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths resolve against its directory.
    /// A set [`SCORER_URL_ENV`] replaces the scorer endpoint.
    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text, overrides)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if cfg.base_dir.as_os_str().is_empty() {
            cfg.base_dir = PathBuf::from(".");
        }
        if let Ok(url) = std::env::var(SCORER_URL_ENV) {
            if !url.is_empty() {
                cfg.scorer.endpoint = Some(url);
            }
        }
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn work_dir(&self) -> PathBuf {
        self.resolve(&self.paths.work_dir)
    }

    pub fn score_cache(&self) -> PathBuf {
        match &self.paths.score_cache {
            Some(p) => self.resolve(p),
            None => self.work_dir().join("scores.jsonl"),
        }
    }

    pub fn checkpoint(&self) -> PathBuf {
        match &self.paths.checkpoint {
            Some(p) => self.resolve(p),
            None => self.work_dir().join("adapter.ckpt"),
        }
    }

    pub fn reports_dir(&self) -> PathBuf {
        match &self.paths.reports {
            Some(p) => self.resolve(p),
            None => self.work_dir(),
        }
    }

    /// Training settings as the pipeline runs them.
    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn eval_modes(&self) -> Result<Vec<EvalMode>> {
        self.eval.modes.iter().map(|m| m.parse()).collect()
    }

    fn uses_latent(&self) -> bool {
        self.scorer.kind == ScorerKind::Synthetic || self.eval.generator == GeneratorKind::Synthetic
    }

    /// Configuration problems, errors first. Touches the filesystem only for
    /// existence checks.
    pub fn validate(&self) -> Vec<ConfigDiagnostic> {
        let mut out = Vec::new();
        let mut err = |key: &str, message: String| {
            out.push(ConfigDiagnostic {
                severity: Severity::Error,
                key: key.into(),
                message,
            })
        };
        let t = &self.train;
        if t.k == 0 {
            err("train.k", "mining K must be at least 1".into());
        }
        if t.epochs == 0 {
            err("train.epochs", "must be at least 1".into());
        }
        if t.batch_size == 0 {
            err("train.batch_size", "must be at least 1".into());
        }
        if !(t.peak_lr > 0.0 && t.peak_lr.is_finite()) {
            err("train.peak_lr", format!("must be positive, got {}", t.peak_lr));
        }
        if !(t.temperature > 0.0 && t.temperature.is_finite()) {
            err("train.temperature", format!("must be positive, got {}", t.temperature));
        }
        let r = &self.retrieval;
        if r.shortlist_n == 0 {
            err("retrieval.shortlist_n", "must be at least 1".into());
        }
        if r.mode == SimilarityMode::Custom && r.pairs.is_empty() {
            err("retrieval.pairs", "custom mode needs at least one pair".into());
        }
        if r.pairs.iter().any(|p| !p.weight.is_finite()) {
            err("retrieval.pairs", "weights must be finite".into());
        }
        match &self.data {
            DataConfig::Synthetic(spec) => {
                if spec.signal_dims == 0 || spec.signal_dims >= spec.dim {
                    err("data.synthetic.signal_dims", format!("must lie in 1..{}", spec.dim));
                }
                if spec.memory_size < 2 {
                    err("data.synthetic.memory_size", "must be at least 2".into());
                }
                if spec.query_size == 0 {
                    err("data.synthetic.query_size", "must be at least 1".into());
                }
                if self.task != Task::Captioning {
                    err("task", "synthetic data is captioning only".into());
                }
            }
            DataConfig::Manifest { train, eval, latent } => {
                for (key, p) in [("data.manifest.train", train), ("data.manifest.eval", eval)] {
                    if !self.resolve(p).is_file() {
                        err(key, format!("{} does not exist", self.resolve(p).display()));
                    }
                }
                match latent {
                    Some(p) if !self.resolve(p).is_file() => {
                        err("data.manifest.latent", format!("{} does not exist", self.resolve(p).display()))
                    }
                    None if self.uses_latent() => err(
                        "data.manifest.latent",
                        "the synthetic scorer and generator need a latent matrix".into(),
                    ),
                    _ => {}
                }
            }
        }
        let needs_endpoint = self.scorer.kind == ScorerKind::Http || self.eval.generator == GeneratorKind::Http;
        if needs_endpoint && self.scorer.endpoint.as_deref().is_none_or(str::is_empty) {
            err("scorer.endpoint", format!("required for http scoring or generation (or set {SCORER_URL_ENV})"));
        }
        if self.scorer.max_in_flight == 0 {
            err("scorer.max_in_flight", "must be at least 1".into());
        }
        if self.scorer.batch_size == 0 {
            err("scorer.batch_size", "must be at least 1".into());
        }
        let e = &self.eval;
        if e.modes.is_empty() {
            err("eval.modes", "at least one mode is required".into());
        }
        for m in &e.modes {
            if let Err(x) = m.parse::<EvalMode>() {
                err("eval.modes", x.to_string());
            }
        }
        if e.shot_counts.is_empty() {
            err("eval.shot_counts", "at least one shot count is required".into());
        }
        if self.task == Task::RankClassification && e.shot_counts.contains(&0) {
            err("eval.shot_counts", "rank classification scores need at least one shot".into());
        }
        if !(0.0..=1.0).contains(&e.mask_rate) {
            err("eval.mask_rate", format!("must lie in [0, 1], got {}", e.mask_rate));
        } else if e.mask_rate > 0.0 && self.task != Task::Captioning {
            err("eval.mask_rate", "masking applies to captioning only".into());
        }
        if e.generator == GeneratorKind::Offline {
            match &e.predictions_dir {
                Some(p) if self.resolve(p).is_dir() => {}
                Some(p) => err("eval.predictions_dir", format!("{} is not a directory", self.resolve(p).display())),
                None => err("eval.predictions_dir", "required by the offline generator".into()),
            }
        }

        if r.shortlist_n > 0 && t.k > 0 && r.shortlist_n < 2 * t.k {
            out.push(ConfigDiagnostic {
                severity: Severity::Warning,
                key: "retrieval.shortlist_n".into(),
                message: format!(
                    "shortlist of {} is smaller than 2K = {}; positives and negatives come from overlapping ranges",
                    r.shortlist_n,
                    2 * t.k
                ),
            });
        }
        out.sort_by_key(|d| d.severity);
        out
    }

    pub fn is_runnable(diagnostics: &[ConfigDiagnostic]) -> bool {
        diagnostics.iter().all(|d| d.severity != Severity::Error)
    }
}
