use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DataConfig, EvalMode, GeneratorKind, PipelineConfig, ScorerKind};
use super::provenance::{meta_path, read_meta};
use super::Stage;
use crate::corpus::{ingest_manifest, load_corpus, persist_corpus, validate_corpus, Corpus, EmbeddingMatrix, ExampleRecord, Task};
use crate::error::{Error, Result};
use crate::eval::{
    assemble_prompt_set, auc_roc, cider_d, mask_ablation, permutation_study, rank_classification_score,
    read_predictions, shot_sweep_report, vqa_accuracy, write_predictions, Generator, HttpGenerator, Metric,
    PermutationReport, Prediction, PredictionRecord, PromptSet, SyntheticGenerator,
};
use crate::io::{read_json, read_jsonl, write_json, write_jsonl};
use crate::retrieval::{read_results, shortlist_candidates, write_results, Mmices, RetrievalResult, Retriever, SimilarityConfig};
use crate::scoring::{mine_all, score_candidates, HttpScorer, MiningResult, ScoreRecord, Scorer, ScoringOptions, SyntheticScorer};
use crate::synthetic;
use crate::trainer::{load_checkpoint, save_checkpoint, train_on_mining, Checkpoint, ProjectionAdapter, StepLog};

pub(super) struct Layout {
    pub work: PathBuf,
}

impl Layout {
    pub fn train_corpus(&self) -> PathBuf {
        self.work.join("corpus/train")
    }
    pub fn eval_corpus(&self) -> PathBuf {
        self.work.join("corpus/eval")
    }
    pub fn latent(&self) -> PathBuf {
        self.work.join("corpus/latent.micl")
    }
    pub fn shortlists(&self) -> PathBuf {
        self.work.join("shortlists.jsonl")
    }
    pub fn mining(&self) -> PathBuf {
        self.work.join("mining.jsonl")
    }
    pub fn train_log(&self) -> PathBuf {
        self.work.join("train_log.json")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.work.join("eval")
    }
    pub fn cells(&self) -> PathBuf {
        self.eval_dir().join("cells.json")
    }
    pub fn permutations(&self) -> PathBuf {
        self.eval_dir().join("permutations.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mode: String,
    pub shots: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_losses: Vec<f64>,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub skipped: Vec<String>,
    pub steps: Vec<StepLog>,
}

fn files_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
        .collect();
    out.sort();
    Ok(out)
}

fn load_latent(l: &Layout) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::read(&l.latent())
}

fn adapter_dim(corpus: &Corpus) -> Result<usize> {
    corpus
        .image_embeddings
        .as_ref()
        .or(corpus.text_embeddings.as_ref())
        .map(EmbeddingMatrix::dim)
        .ok_or_else(|| Error::InvalidArgument("training corpus has no embeddings".into()))
}

pub(super) fn ingest(cfg: &PipelineConfig, l: &Layout) -> Result<Vec<PathBuf>> {
    let (train, eval, latent) = match &cfg.data {
        DataConfig::Synthetic(spec) => {
            let data = synthetic::generate(spec)?;
            (data.memory, data.queries, Some(data.latent))
        }
        DataConfig::Manifest { train, eval, latent } => {
            let mut corpora = Vec::new();
            for p in [train, eval] {
                let c = ingest_manifest(&cfg.resolve(p))?;
                let diags = validate_corpus(&c);
                if !diags.is_empty() {
                    let list: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
                    return Err(Error::InvalidArgument(format!(
                        "{} failed validation: {}",
                        cfg.resolve(p).display(),
                        list.join("; ")
                    )));
                }
                corpora.push(c);
            }
            let latent = latent.as_ref().map(|p| EmbeddingMatrix::read(&cfg.resolve(p))).transpose()?;
            let eval = corpora.pop().expect("two corpora");
            (corpora.pop().expect("two corpora"), eval, latent)
        }
    };
    if train.is_empty() {
        return Err(Error::EmptyMemory);
    }
    for dir in [l.train_corpus(), l.eval_corpus()] {
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
    }
    persist_corpus(&train, &l.train_corpus())?;
    persist_corpus(&eval, &l.eval_corpus())?;
    let mut out = files_in(&l.train_corpus())?;
    out.extend(files_in(&l.eval_corpus())?);
    match latent {
        Some(m) => {
            m.write(&l.latent())?;
            out.push(l.latent());
        }
        None if l.latent().exists() => std::fs::remove_file(l.latent()).map_err(|e| Error::io(l.latent(), e))?,
        None => {}
    }
    log::info!("ingested {} memory and {} query records", train.len(), eval.len());
    Ok(out)
}

pub(super) fn retrieve(cfg: &PipelineConfig, l: &Layout) -> Result<Vec<PathBuf>> {
    let train = load_corpus(&l.train_corpus())?;
    let shortlists = shortlist_candidates(&train, &cfg.retrieval.similarity(), cfg.retrieval.shortlist_n)?;
    write_results(&l.shortlists(), &shortlists.results)?;
    Ok(vec![l.shortlists()])
}

fn make_scorer(cfg: &PipelineConfig, l: &Layout) -> Result<Box<dyn Scorer>> {
    Ok(match cfg.scorer.kind {
        ScorerKind::Synthetic => Box::new(SyntheticScorer::new(load_latent(l)?)),
        ScorerKind::Http => Box::new(http_client(cfg)?),
    })
}

fn http_client(cfg: &PipelineConfig) -> Result<HttpScorer> {
    let url = cfg
        .scorer
        .endpoint
        .as_deref()
        .ok_or_else(|| Error::Config("scorer.endpoint is not set".into()))?;
    Ok(HttpScorer::new(url).with_attempts(cfg.scorer.attempts))
}

pub(super) fn score(cfg: &PipelineConfig, l: &Layout, config_hash: &str) -> Result<Vec<PathBuf>> {
    let cache = cfg.score_cache();
    let marker = meta_path(&l.work, "score").with_extension("partial");
    if cache.exists() {
        // entries may be reused only when they came from this scorer configuration
        let done = read_meta(&l.work, "score")?.is_some_and(|m| m.config_hash == config_hash);
        let partial = std::fs::read_to_string(&marker).is_ok_and(|h| h.trim() == config_hash);
        if !(done || partial) {
            log::warn!("discarding score cache {} from a different scorer configuration", cache.display());
            std::fs::remove_file(&cache).map_err(|e| Error::io(&cache, e))?;
        }
    }
    crate::io::write_atomic(&marker, config_hash.as_bytes())?;
    let train = load_corpus(&l.train_corpus())?;
    let shortlists = read_results(&l.shortlists())?;
    let scorer = make_scorer(cfg, l)?;
    let opts = ScoringOptions {
        cache: Some(cache.clone()),
        max_in_flight: cfg.scorer.max_in_flight,
        batch_size: cfg.scorer.batch_size,
    };
    let records = score_candidates(cfg.task, &train, &train, &shortlists, scorer.as_ref(), &opts)?;
    log::info!("{} scored pairs", records.len());
    let _ = std::fs::remove_file(&marker);
    Ok(vec![cache])
}

pub(super) fn mine(cfg: &PipelineConfig, l: &Layout) -> Result<Vec<PathBuf>> {
    let scores: Vec<ScoreRecord> = read_jsonl(&cfg.score_cache())?;
    let mining = mine_all(&scores, cfg.train.k)?;
    write_jsonl(&l.mining(), &mining)?;
    Ok(vec![l.mining()])
}

pub(super) fn train(cfg: &PipelineConfig, l: &Layout, config_hash: &str) -> Result<Vec<PathBuf>> {
    let corpus = load_corpus(&l.train_corpus())?;
    let mining: Vec<MiningResult> = read_jsonl(&l.mining())?;
    let tc = cfg.effective_train();
    let out = train_on_mining(
        &corpus,
        &mining,
        &cfg.retrieval.similarity(),
        ProjectionAdapter::identity(adapter_dim(&corpus)?),
        &tc,
    )?;
    let mut ckpt = Checkpoint::new(out.adapter, config_hash);
    ckpt.optimizer = Some(out.optimizer);
    ckpt.metadata.insert("stage".into(), Stage::Train.to_string());
    ckpt.metadata.insert("seed".into(), cfg.seed.to_string());
    ckpt.metadata.insert("total_steps".into(), out.total_steps.to_string());
    ckpt.metadata.insert("warmup_steps".into(), out.warmup_steps.to_string());
    if let (Some(first), Some(last)) = (out.epoch_losses.first(), out.epoch_losses.last()) {
        ckpt.metadata.insert("first_epoch_loss".into(), first.to_string());
        ckpt.metadata.insert("last_epoch_loss".into(), last.to_string());
    }
    save_checkpoint(&ckpt, &cfg.checkpoint())?;
    write_json(
        &l.train_log(),
        &TrainLog {
            epoch_losses: out.epoch_losses,
            total_steps: out.total_steps,
            warmup_steps: out.warmup_steps,
            skipped: out.skipped,
            steps: out.log,
        },
    )?;
    Ok(vec![cfg.checkpoint(), l.train_log()])
}

/// Ground-truth references of a captioning query.
fn references(q: &ExampleRecord) -> Result<Vec<String>> {
    let refs: Vec<String> = match (&q.answer, &q.text) {
        (Some(a), _) => a.all().into_iter().map(str::to_string).collect(),
        (None, Some(t)) => vec![t.clone()],
        (None, None) => Vec::new(),
    };
    if refs.is_empty() {
        return Err(Error::Eval(format!("query {:?} has no reference caption", q.id)));
    }
    Ok(refs)
}

fn positive_label(q: &ExampleRecord) -> Result<bool> {
    match (q.label, &q.answer) {
        (Some(l), _) => Ok(l == 1),
        (None, Some(a)) => Ok(a.consensus() == Some("yes")),
        _ => Err(Error::Eval(format!("query {:?} has no label", q.id))),
    }
}

/// Task metric of one prediction per query.
pub fn task_metric(task: Task, queries: &[ExampleRecord], predictions: &[Prediction]) -> Result<f64> {
    let text = |p: &Prediction| match p {
        Prediction::Text(t) => Ok(t.clone()),
        Prediction::Score(_) => Err(Error::Eval(format!("{task} expects generated text, found a score"))),
    };
    match task {
        Task::Captioning => {
            let preds = predictions.iter().map(text).collect::<Result<Vec<_>>>()?;
            let refs = queries.iter().map(references).collect::<Result<Vec<_>>>()?;
            cider_d(&preds, &refs)
        }
        Task::Vqa => {
            let mut sum = 0.0;
            for (q, p) in queries.iter().zip(predictions) {
                let gts: Vec<String> = q
                    .answer
                    .as_ref()
                    .ok_or_else(|| Error::Eval(format!("query {:?} has no answers", q.id)))?
                    .all()
                    .into_iter()
                    .map(str::to_string)
                    .collect();
                sum += vqa_accuracy(&text(p)?, &gts);
            }
            if queries.is_empty() {
                return Err(Error::Eval("no queries to evaluate".into()));
            }
            Ok(sum / queries.len() as f64)
        }
        Task::RankClassification => {
            let scores = predictions
                .iter()
                .map(|p| match p {
                    Prediction::Score(s) => Ok(*s),
                    Prediction::Text(t) => Ok(if t.trim().eq_ignore_ascii_case("yes") { 1.0 } else { 0.0 }),
                })
                .collect::<Result<Vec<_>>>()?;
            let labels = queries.iter().map(positive_label).collect::<Result<Vec<_>>>()?;
            auc_roc(&scores, &labels)
        }
    }
}

enum Source {
    Generator(Box<dyn Generator>),
    Offline(PathBuf),
}

struct EvalCtx<'a> {
    task: Task,
    memory: &'a Corpus,
    queries: &'a Corpus,
    source: Source,
    scorer: Option<Box<dyn Scorer>>,
}

impl EvalCtx<'_> {
    fn predict(&self, prompts: &[PromptSet], offline_name: &str) -> Result<Vec<Prediction>> {
        if let Source::Offline(dir) = &self.source {
            let path = dir.join(format!("{offline_name}.jsonl"));
            let by_id: HashMap<String, Prediction> = read_predictions(&path)?
                .into_iter()
                .map(|r| (r.query_id, r.output))
                .collect();
            return prompts
                .iter()
                .map(|p| {
                    by_id.get(&p.query_id).cloned().ok_or_else(|| {
                        Error::Eval(format!("{} has no prediction for query {:?}", path.display(), p.query_id))
                    })
                })
                .collect();
        }
        prompts
            .par_iter()
            .map(|p| self.predict_one(p))
            .collect()
    }

    fn predict_one(&self, prompt: &PromptSet) -> Result<Prediction> {
        if self.task == Task::RankClassification {
            // mean class score over the shots, each scored one-shot
            let scorer = self.scorer.as_deref().expect("scorer for rank classification");
            let query = self.queries.get(&prompt.query_id).expect("prompt query in corpus");
            let mut sum = 0.0;
            for s in &prompt.shots {
                let shot = self.memory.get(&s.example_id).expect("shot in memory");
                sum += rank_classification_score(scorer, query, shot)?;
            }
            return Ok(Prediction::Score(sum / prompt.shots.len().max(1) as f64));
        }
        match &self.source {
            Source::Generator(g) => Ok(Prediction::Text(g.generate(prompt)?)),
            Source::Offline(_) => unreachable!("offline predictions are read in bulk"),
        }
    }
}

fn retrieve_for_mode(
    cfg: &PipelineConfig,
    mode: EvalMode,
    memory: &Corpus,
    queries: &Corpus,
    k: usize,
) -> Result<Vec<RetrievalResult>> {
    match mode {
        EvalMode::Unsupervised(m) => Retriever::new(memory, SimilarityConfig::new(m))?.topk_all(queries, k, false),
        EvalMode::Msier => {
            let ckpt = load_checkpoint(&cfg.checkpoint())?;
            let sim = cfg.retrieval.similarity().with_adapter(Arc::new(ckpt.adapter));
            Retriever::new(memory, sim)?.topk_all(queries, k, false)
        }
        EvalMode::Mmices => {
            let m = Mmices::new(memory)?;
            let n_visual = cfg.retrieval.mmices_n_visual.max(k);
            queries
                .records
                .par_iter()
                .map(|q| m.retrieve(q, queries, n_visual, k, false))
                .collect()
        }
    }
}

pub(super) fn eval(cfg: &PipelineConfig, l: &Layout) -> Result<Vec<PathBuf>> {
    let memory = load_corpus(&l.train_corpus())?;
    let queries = load_corpus(&l.eval_corpus())?;
    let source = match cfg.eval.generator {
        GeneratorKind::Synthetic => Source::Generator(Box::new(SyntheticGenerator::new(load_latent(l)?))),
        GeneratorKind::Http => Source::Generator(Box::new(HttpGenerator::new(http_client(cfg)?))),
        GeneratorKind::Offline => Source::Offline(cfg.resolve(
            cfg.eval
                .predictions_dir
                .as_deref()
                .ok_or_else(|| Error::Config("eval.predictions_dir is not set".into()))?,
        )),
    };
    let scorer = if cfg.task == Task::RankClassification && !matches!(source, Source::Offline(_)) {
        Some(make_scorer(cfg, l)?)
    } else {
        None
    };
    let ctx = EvalCtx {
        task: cfg.task,
        memory: &memory,
        queries: &queries,
        source,
        scorer,
    };

    let dir = l.eval_dir();
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut outputs = Vec::new();
    let mut cells = Vec::new();
    let mut perms: Vec<PermutationReport> = Vec::new();
    let max_shots = cfg.eval.shot_counts.iter().copied().max().unwrap_or(0);
    let k = max_shots.max(if cfg.eval.permutation_study { 3 } else { 1 });
    for (name, mode) in cfg.eval.modes.iter().zip(cfg.eval_modes()?) {
        let results = retrieve_for_mode(cfg, mode, &memory, &queries, k)?;
        let dump = dir.join(format!("retrieved_{name}.jsonl"));
        write_results(&dump, &results)?;
        outputs.push(dump);

        let prompts_for = |shots: usize| -> Result<Vec<PromptSet>> {
            queries
                .records
                .iter()
                .zip(&results)
                .map(|(q, r)| {
                    let p = assemble_prompt_set(cfg.task, q, &memory, r, shots, cfg.eval.order)?;
                    if cfg.eval.mask_rate > 0.0 {
                        mask_ablation(&p, cfg.eval.mask_rate, cfg.seed)
                    } else {
                        Ok(p)
                    }
                })
                .collect()
        };
        for &shots in &cfg.eval.shot_counts {
            let prompts = prompts_for(shots)?;
            let predictions = ctx.predict(&prompts, &format!("{name}_{shots}"))?;
            let value = task_metric(cfg.task, &queries.records, &predictions)?;
            log::info!("{name} {shots} shots: {} = {value}", Metric::for_task(cfg.task));
            let path = dir.join("predictions").join(format!("{name}_{shots}.jsonl"));
            let records: Vec<PredictionRecord> = prompts
                .iter()
                .zip(predictions)
                .map(|(p, output)| PredictionRecord {
                    query_id: p.query_id.clone(),
                    output,
                })
                .collect();
            write_predictions(&path, &records)?;
            outputs.push(path);
            cells.push(Cell {
                mode: name.clone(),
                shots,
                value,
            });
        }
        if cfg.eval.permutation_study {
            let base = prompts_for(3)?;
            let orders = crate::eval::permutations(3);
            perms.push(permutation_study(name, 3, |order| {
                let idx = orders.iter().position(|o| o == order).expect("enumerated order");
                let prompts = base
                    .iter()
                    .map(|p| if p.shots.len() == 3 { p.permuted(order) } else { Ok(p.clone()) })
                    .collect::<Result<Vec<_>>>()?;
                let predictions = ctx.predict(&prompts, &format!("{name}_perm{idx}"))?;
                task_metric(cfg.task, &queries.records, &predictions)
            })?);
        }
    }
    write_json(&l.cells(), &cells)?;
    outputs.push(l.cells());
    if cfg.eval.permutation_study {
        write_json(&l.permutations(), &perms)?;
        outputs.push(l.permutations());
    }
    Ok(outputs)
}

pub(super) fn report(cfg: &PipelineConfig, l: &Layout, config_hash: &str) -> Result<Vec<PathBuf>> {
    let cells: Vec<Cell> = read_json(&l.cells())?;
    let map: BTreeMap<(String, usize), f64> = cells.into_iter().map(|c| ((c.mode, c.shots), c.value)).collect();
    let mut metadata = BTreeMap::new();
    metadata.insert("retriever".to_string(), cfg.retrieval.mode.to_string());
    metadata.insert("seed".to_string(), cfg.seed.to_string());
    metadata.insert("config_hash".to_string(), config_hash.to_string());
    metadata.insert("order".to_string(), serde_json::to_string(&cfg.eval.order).unwrap_or_default());
    metadata.insert("mask_rate".to_string(), cfg.eval.mask_rate.to_string());
    if cfg.eval_modes()?.contains(&EvalMode::Msier) {
        metadata.insert("adapter_checkpoint_sha256".to_string(), crate::io::sha256_file(&cfg.checkpoint())?);
    }
    let report = shot_sweep_report(
        cfg.task,
        Metric::for_task(cfg.task),
        &cfg.eval.modes,
        &cfg.eval.shot_counts,
        &map,
        metadata,
    )?;
    let mut text = report.render_table();
    if l.permutations().exists() && cfg.eval.permutation_study {
        let perms: Vec<PermutationReport> = read_json(&l.permutations())?;
        text.push_str("\nOrder permutations (3 shots)\n");
        for p in perms {
            text.push_str(&format!("{}  mean {:.4}  std {:.4}\n", p.mode, p.mean, p.std));
        }
    }
    let dir = cfg.reports_dir();
    write_json(&dir.join("report.json"), &report)?;
    crate::io::write_atomic(&dir.join("report.txt"), text.as_bytes())?;
    Ok(vec![dir.join("report.json"), dir.join("report.txt")])
}
