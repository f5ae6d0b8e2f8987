//! Contrastive training of projection adapters.
//!
//! Each step draws `N_b` mined queries with one positive and one hard negative
//! each. Query `j` is scored against all `2 N_b` contexts in the batch: its own
//! positive, its own negative, and every other query's positive and negative.

mod adapter;
mod checkpoint;
mod loss;
mod optim;
mod sampler;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adapter::{ProjectionAdapter, Side, Slot};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use loss::{
    contrastive_loss, contrastive_loss_grad, encode_batch, loss_from_similarities, EncodedBatch, Example,
    Gradients, TrainingBatch,
};
pub use optim::{adamw_step, adamw_update, lr_at_step, AdamState, AdamWConfig};
pub use sampler::{sample_batch, BatchItem, BatchSampler};

use crate::corpus::{Corpus, ExampleRecord, Modality};
use crate::error::{Error, Result};
use crate::retrieval::SimilarityConfig;
use crate::scoring::{mine_all, MiningResult, ScoreRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    /// Defaults to 10% of the total step count.
    pub warmup_steps: Option<usize>,
    pub batch_size: usize,
    pub k: usize,
    pub temperature: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Matrices kept fixed during training.
    pub freeze: Vec<Slot>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            peak_lr: 1e-5,
            warmup_steps: None,
            batch_size: 32,
            k: 5,
            temperature: 1.0,
            seed: 0,
            optimizer: AdamWConfig::default(),
            freeze: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.k == 0 {
            return bad("K must be at least 1");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak learning rate must be positive");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        Ok(())
    }

    pub fn warmup_for(&self, total_steps: usize) -> usize {
        self.warmup_steps.unwrap_or(total_steps / 10)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub adapter: ProjectionAdapter,
    pub optimizer: AdamState,
    pub log: Vec<StepLog>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Queries without a positive or a negative.
    pub skipped: Vec<String>,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

fn unit_f64(v: &[f32]) -> Vec<f64> {
    let v: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Unit-normalized inputs of `record` for the given modalities; absent ones are skipped.
pub fn example_for(corpus: &Corpus, record: &ExampleRecord, modalities: &[Modality]) -> Result<Example> {
    let inputs: Vec<(Modality, Vec<f64>)> = modalities
        .iter()
        .filter_map(|m| corpus.embedding(record, *m).map(|v| (*m, unit_f64(v))))
        .collect();
    if inputs.is_empty() {
        return Err(Error::UnresolvedModality {
            record: record.id.clone(),
            modality: modalities.iter().map(|m| m.to_string()).collect::<Vec<_>>().join("+"),
        });
    }
    Ok(Example {
        id: record.id.clone(),
        inputs,
    })
}

/// Mines `scores` with `cfg.k` and trains.
pub fn train(
    corpus: &Corpus,
    scores: &[ScoreRecord],
    sim: &SimilarityConfig,
    init: ProjectionAdapter,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mining = mine_all(scores, cfg.k)?;
    train_on_mining(corpus, &mining, sim, init, cfg)
}

/// Training loop over precomputed mining results.
///
/// Queries are encoded from `sim`'s query-side modalities and contexts from its
/// memory-side modalities. Runs single-threaded; results depend only on the
/// inputs and `cfg.seed`.
pub fn train_on_mining(
    corpus: &Corpus,
    mining: &[MiningResult],
    sim: &SimilarityConfig,
    init: ProjectionAdapter,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut adapter = init;
    for slot in &cfg.freeze {
        adapter.set_frozen(*slot, true);
    }
    let query_modalities = sim.modalities(Side::Query);
    let context_modalities = sim.modalities(Side::Context);
    let index = corpus.index_by_id();
    let record = |id: &str| -> Result<&ExampleRecord> {
        index
            .get(id)
            .map(|&i| &corpus.records[i])
            .ok_or_else(|| Error::InvalidArgument(format!("mined id {id:?} is not in the training corpus")))
    };

    let sampler = BatchSampler::new(mining, cfg.batch_size);
    if sampler.usable() == 0 {
        return Err(Error::InvalidArgument("no query has both a mined positive and negative".into()));
    }
    let mut query_cache: HashMap<String, Example> = HashMap::new();
    let mut context_cache: HashMap<String, Example> = HashMap::new();
    for m in mining {
        if !query_cache.contains_key(&m.query_id) {
            query_cache.insert(m.query_id.clone(), example_for(corpus, record(&m.query_id)?, &query_modalities)?);
        }
        for id in m.positives.iter().chain(&m.negatives) {
            if !context_cache.contains_key(id) {
                context_cache.insert(id.clone(), example_for(corpus, record(id)?, &context_modalities)?);
            }
        }
    }

    let steps_per_epoch = sampler.steps_per_epoch();
    let total_steps = cfg.epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_for(total_steps);
    if warmup_steps >= total_steps {
        return Err(Error::InvalidArgument(format!(
            "warmup of {warmup_steps} steps does not fit in {total_steps} total steps"
        )));
    }
    log::info!(
        "training {} queries for {} epochs ({} steps, warmup {}), {} skipped",
        sampler.usable(),
        cfg.epochs,
        total_steps,
        warmup_steps,
        sampler.skipped().len()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(adapter.dim());
    let mut log = Vec::with_capacity(total_steps);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let batches = sampler.epoch(&mut rng);
        let n = batches.len();
        for items in batches {
            let batch = TrainingBatch {
                queries: items.iter().map(|b| query_cache[&b.query].clone()).collect(),
                positives: items.iter().map(|b| context_cache[&b.positive].clone()).collect(),
                negatives: items.iter().map(|b| context_cache[&b.negative].clone()).collect(),
            };
            let lr = lr_at_step(step, total_steps, warmup_steps, cfg.peak_lr)?;
            let (loss, grads) = contrastive_loss_grad(&batch, &adapter, cfg.temperature)?;
            adamw_step(&mut adapter, &grads, &mut state, step as u64 + 1, lr, &cfg.optimizer)?;
            sum += loss;
            log.push(StepLog { step, epoch, lr, loss });
            step += 1;
        }
        let mean = sum / n as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(TrainOutput {
        adapter,
        optimizer: state,
        log,
        epoch_losses,
        skipped: sampler.skipped().to_vec(),
        total_steps,
        warmup_steps,
    })
}
