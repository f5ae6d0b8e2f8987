use crate::corpus::Modality;
use crate::error::{Error, Result};

use super::adapter::{ProjectionAdapter, Side, Slot};

/// One record's unit-normalized modality embeddings, in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub inputs: Vec<(Modality, Vec<f64>)>,
}

impl Example {
    fn as_inputs(&self) -> Vec<(Modality, &[f64])> {
        self.inputs.iter().map(|(m, v)| (*m, v.as_slice())).collect()
    }
}

/// Raw inputs for one optimization step: query `j` is paired with
/// `positives[j]` and `negatives[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub queries: Vec<Example>,
    pub positives: Vec<Example>,
    pub negatives: Vec<Example>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Contexts in column order: `[pos_0, neg_0, pos_1, neg_1, ...]`.
    fn contexts(&self) -> impl Iterator<Item = &Example> {
        self.positives.iter().zip(&self.negatives).flat_map(|(p, n)| [p, n])
    }

    fn check(&self) -> Result<()> {
        if self.queries.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        if self.positives.len() != self.queries.len() || self.negatives.len() != self.queries.len() {
            return Err(Error::InvalidArgument(format!(
                "batch has {} queries, {} positives and {} negatives",
                self.queries.len(),
                self.positives.len(),
                self.negatives.len()
            )));
        }
        Ok(())
    }
}

/// Encoded unit vectors; same layout as [`TrainingBatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub queries: Vec<Vec<f64>>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

/// Gradient of the loss with respect to each projection matrix (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dim: usize,
    pub slots: [Vec<f64>; 4],
}

impl Gradients {
    pub fn zeros(dim: usize) -> Self {
        let z = vec![0.0; dim * dim];
        Self {
            dim,
            slots: [z.clone(), z.clone(), z.clone(), z],
        }
    }

    pub fn slot(&self, slot: Slot) -> &[f64] {
        &self.slots[slot.index()]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn encode(adapter: &ProjectionAdapter, side: Side, ex: &Example) -> Result<(Vec<f64>, f64)> {
    adapter
        .encode(side, &ex.as_inputs())
        .ok_or_else(|| Error::ZeroProjection(ex.id.clone()))
}

pub fn encode_batch(batch: &TrainingBatch, adapter: &ProjectionAdapter) -> Result<EncodedBatch> {
    batch.check()?;
    let side = |exs: &[Example], side: Side| -> Result<Vec<Vec<f64>>> {
        exs.iter().map(|e| encode(adapter, side, e).map(|(x, _)| x)).collect()
    };
    Ok(EncodedBatch {
        queries: side(&batch.queries, Side::Query)?,
        positives: side(&batch.positives, Side::Context)?,
        negatives: side(&batch.negatives, Side::Context)?,
    })
}

/// Loss and `dL/ds` from an `N_b x 2N_b` similarity matrix whose column `2j`
/// holds query `j`'s positive.
///
/// Every other column is a negative for row `j`. The loss is the mean over rows
/// of `-log softmax(s_j / temperature)[2j]`.
pub fn loss_from_similarities(sims: &[Vec<f64>], temperature: f64) -> (f64, Vec<Vec<f64>>) {
    let n = sims.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(sims.len());
    for (j, row) in sims.iter().enumerate() {
        let logits: Vec<f64> = row.iter().map(|s| s / temperature).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += max + sum.ln() - logits[2 * j];
        grad.push(
            exps.iter()
                .enumerate()
                .map(|(k, e)| {
                    let p = e / sum;
                    let target = if k == 2 * j { 1.0 } else { 0.0 };
                    (p - target) / (temperature * n)
                })
                .collect(),
        );
    }
    (total / n, grad)
}

fn similarities(queries: &[Vec<f64>], contexts: &[&Vec<f64>]) -> Vec<Vec<f64>> {
    queries
        .iter()
        .map(|q| contexts.iter().map(|c| dot(q, c)).collect())
        .collect()
}

/// In-batch contrastive loss over encoded vectors.
pub fn contrastive_loss(batch: &EncodedBatch, temperature: f64) -> f64 {
    let contexts: Vec<&Vec<f64>> = batch.positives.iter().zip(&batch.negatives).flat_map(|(p, n)| [p, n]).collect();
    loss_from_similarities(&similarities(&batch.queries, &contexts), temperature).0
}

/// Loss and analytic gradients with respect to every unfrozen matrix.
pub fn contrastive_loss_grad(
    batch: &TrainingBatch,
    adapter: &ProjectionAdapter,
    temperature: f64,
) -> Result<(f64, Gradients)> {
    batch.check()?;
    let queries: Vec<(Vec<f64>, f64)> = batch
        .queries
        .iter()
        .map(|e| encode(adapter, Side::Query, e))
        .collect::<Result<_>>()?;
    let contexts: Vec<(Vec<f64>, f64)> = batch
        .contexts()
        .map(|e| encode(adapter, Side::Context, e))
        .collect::<Result<_>>()?;

    let qx: Vec<Vec<f64>> = queries.iter().map(|(x, _)| x.clone()).collect();
    let cx: Vec<&Vec<f64>> = contexts.iter().map(|(x, _)| x).collect();
    let (loss, g_s) = loss_from_similarities(&similarities(&qx, &cx), temperature);

    let dim = adapter.dim();
    let mut grads = Gradients::zeros(dim);
    for (j, (ex, (x, norm))) in batch.queries.iter().zip(&queries).enumerate() {
        let mut g_x = vec![0.0; dim];
        for (k, c) in cx.iter().enumerate() {
            g_x.iter_mut().zip(c.iter()).for_each(|(g, v)| *g += g_s[j][k] * v);
        }
        backprop(adapter, Side::Query, ex, x, *norm, &g_x, &mut grads);
    }
    for (k, (ex, (c, norm))) in batch.contexts().zip(&contexts).enumerate() {
        let mut g_c = vec![0.0; dim];
        for (j, x) in qx.iter().enumerate() {
            g_c.iter_mut().zip(x).for_each(|(g, v)| *g += g_s[j][k] * v);
        }
        backprop(adapter, Side::Context, ex, c, *norm, &g_c, &mut grads);
    }
    Ok((loss, grads))
}

/// Chains `dL/dx` through `x = z / |z|` and `z = Σ W_m v_m`.
fn backprop(
    adapter: &ProjectionAdapter,
    side: Side,
    ex: &Example,
    x: &[f64],
    norm: f64,
    g_x: &[f64],
    grads: &mut Gradients,
) {
    let xg = dot(x, g_x);
    let g_z: Vec<f64> = g_x.iter().zip(x).map(|(g, xi)| (g - xi * xg) / norm).collect();
    let dim = adapter.dim();
    for (modality, v) in &ex.inputs {
        let slot = Slot::of(side, *modality);
        if adapter.is_frozen(slot) {
            continue;
        }
        let w = &mut grads.slots[slot.index()];
        for (r, gz) in g_z.iter().enumerate() {
            let row = &mut w[r * dim..(r + 1) * dim];
            row.iter_mut().zip(v).for_each(|(acc, vc)| *acc += gz * vc);
        }
    }
}
