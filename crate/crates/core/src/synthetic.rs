//! Seeded synthetic corpora with a hidden "helpfulness" latent.
//!
//! Every item draws a signal vector `z` and a nuisance vector `u`. Its raw image
//! embedding is a fixed random rotation of `[scale * z; u]` and its text
//! embedding is the image embedding plus isotropic noise. The latent row used by
//! the synthetic scorer is `z / |z|`, so raw cosine similarity is dominated by
//! the nuisance coordinates while the latent is recoverable by a linear map.
//!
//! Captions are built from the signs of the leading signal coordinates, so items
//! with similar latents share words.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Answer, Corpus, EmbeddingMatrix, ExampleRecord, Modality, Task};
use crate::error::{Error, Result};

const WORDS: [(&str, &str); 8] = [
    ("red", "blue"),
    ("dog", "cat"),
    ("running", "sleeping"),
    ("on grass", "on a sofa"),
    ("small", "large"),
    ("near a bus", "near a tree"),
    ("at night", "in daylight"),
    ("with a ball", "with a hat"),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub memory_size: usize,
    pub query_size: usize,
    pub dim: usize,
    /// Number of latent (helpfulness) coordinates; the rest are nuisance.
    pub signal_dims: usize,
    /// Multiplier on the signal block inside the raw embedding.
    pub signal_scale: f64,
    /// Standard deviation of the text-embedding noise, per coordinate.
    pub text_noise: f64,
    pub encoder: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            memory_size: 2000,
            query_size: 200,
            dim: 64,
            signal_dims: 16,
            signal_scale: 1.0,
            text_noise: 0.5,
            encoder: "synthetic-rotation".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub memory: Corpus,
    pub queries: Corpus,
    /// Unit latent rows keyed by record id, for memory and query records alike.
    pub latent: EmbeddingMatrix,
}

pub fn gaussian(rng: &mut impl Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Random orthogonal matrix (row-major) from Gram-Schmidt on Gaussian rows.
pub fn random_rotation(rng: &mut impl Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for r in &rows {
            let p: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
        }
    }
    rows
}

fn caption(z: &[f64]) -> String {
    let pick = |i: usize| if z[i % z.len()] >= 0.0 { WORDS[i].0 } else { WORDS[i].1 };
    format!(
        "a {} {} {} {} {}",
        pick(4),
        pick(0),
        pick(1),
        pick(2),
        [pick(3), pick(5), pick(6), pick(7)].join(" ")
    )
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.signal_dims == 0 || spec.signal_dims >= spec.dim {
        return Err(Error::InvalidArgument(format!(
            "signal_dims must lie in 1..{}, got {}",
            spec.dim, spec.signal_dims
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rotation = random_rotation(&mut rng, spec.dim);

    let mut latent_rows = Vec::new();
    let mut build = |prefix: &str, count: usize, is_query: bool| -> Result<Corpus> {
        let mut records = Vec::with_capacity(count);
        let mut image_rows = Vec::with_capacity(count);
        let mut text_rows = Vec::new();
        for i in 0..count {
            let z: Vec<f64> = (0..spec.signal_dims).map(|_| gaussian(&mut rng)).collect();
            let mut block: Vec<f64> = z.iter().map(|v| v * spec.signal_scale).collect();
            block.extend((spec.signal_dims..spec.dim).map(|_| gaussian(&mut rng)));
            let image: Vec<f64> = rotation
                .iter()
                .map(|row| row.iter().zip(&block).map(|(a, b)| a * b).sum())
                .collect();
            let noise: Vec<f64> = (0..spec.dim).map(|_| gaussian(&mut rng) * spec.text_noise).collect();
            let text: Vec<f32> = image.iter().zip(&noise).map(|(a, b)| (a + b) as f32).collect();

            let id = format!("{prefix}{i:05}");
            let image_key = format!("{prefix}img{i:05}");
            let cap = caption(&z);
            records.push(if is_query {
                ExampleRecord {
                    id: id.clone(),
                    image_key: Some(image_key.clone()),
                    text: None,
                    answer: Some(Answer::Many(vec![cap])),
                    label: None,
                    task: Task::Captioning,
                }
            } else {
                ExampleRecord::captioning(id.clone(), image_key.clone(), cap)
            });
            image_rows.push((image_key, image.iter().map(|&v| v as f32).collect::<Vec<f32>>()));
            if !is_query {
                text_rows.push((id.clone(), text));
            }
            let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            latent_rows.push((id, z.iter().map(|v| (v / n) as f32).collect::<Vec<f32>>()));
        }
        let encoder = Some(spec.encoder.clone());
        let mut metadata = BTreeMap::new();
        metadata.insert("encoder".to_string(), spec.encoder.clone());
        metadata.insert("source".to_string(), format!("synthetic seed {}", spec.seed));
        Ok(Corpus {
            records,
            image_embeddings: Some(EmbeddingMatrix::from_rows(Modality::Image, spec.dim, image_rows, encoder.clone())?),
            text_embeddings: if is_query {
                None
            } else {
                Some(EmbeddingMatrix::from_rows(Modality::Text, spec.dim, text_rows, encoder)?)
            },
            metadata,
        })
    };
    let memory = build("m", spec.memory_size, false)?;
    let queries = build("q", spec.query_size, true)?;
    let latent = EmbeddingMatrix::from_rows(Modality::Text, spec.signal_dims, latent_rows, Some("latent".into()))?;
    Ok(SyntheticData { memory, queries, latent })
}

/// Random normalized captioning corpus with image and text rows.
///
/// Every `dup_every`-th record reuses the image key of its predecessor, which
/// produces exact score ties under image-only similarity.
pub fn random_corpus(rng: &mut impl Rng, size: usize, dim: usize, dup_every: usize) -> Corpus {
    let mut records = Vec::with_capacity(size);
    let mut image_rows = Vec::new();
    let mut text_rows = Vec::new();
    fn unit(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
        let v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter().map(|x| (x / n) as f32).collect()
    }
    for i in 0..size {
        let id = format!("r{i:04}");
        let reuse = dup_every > 0 && i > 0 && i % dup_every == 0;
        let image_key = if reuse {
            records.last().map(|r: &ExampleRecord| r.image_key.clone().unwrap()).unwrap()
        } else {
            let key = format!("img{i:04}");
            image_rows.push((key.clone(), unit(rng, dim)));
            key
        };
        text_rows.push((id.clone(), unit(rng, dim)));
        records.push(ExampleRecord::captioning(id, image_key, format!("caption {i}")));
    }
    Corpus {
        records,
        image_embeddings: Some(EmbeddingMatrix::from_rows(Modality::Image, dim, image_rows, None).unwrap()),
        text_embeddings: Some(EmbeddingMatrix::from_rows(Modality::Text, dim, text_rows, None).unwrap()),
        metadata: BTreeMap::new(),
    }
}
