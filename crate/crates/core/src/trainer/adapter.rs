use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::Modality;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Query,
    Context,
}

/// One of the four projection matrices, indexed by encoder side and modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    QueryImage,
    QueryText,
    ContextImage,
    ContextText,
}

impl Slot {
    pub const ALL: [Slot; 4] = [
        Slot::QueryImage,
        Slot::QueryText,
        Slot::ContextImage,
        Slot::ContextText,
    ];

    pub fn of(side: Side, modality: Modality) -> Self {
        match (side, modality) {
            (Side::Query, Modality::Image) => Slot::QueryImage,
            (Side::Query, Modality::Text) => Slot::QueryText,
            (Side::Context, Modality::Image) => Slot::ContextImage,
            (Side::Context, Modality::Text) => Slot::ContextText,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Slot::QueryImage => "query_image",
            Slot::QueryText => "query_text",
            Slot::ContextImage => "context_image",
            Slot::ContextText => "context_text",
        })
    }
}

/// Bias-free square projections applied to frozen embeddings before normalization.
///
/// Matrices are row-major `dim x dim`; a fresh adapter is the identity on every slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionAdapter {
    dim: usize,
    weights: [Vec<f64>; 4],
    frozen: [bool; 4],
}

impl ProjectionAdapter {
    pub fn identity(dim: usize) -> Self {
        let mut eye = vec![0.0; dim * dim];
        for i in 0..dim {
            eye[i * dim + i] = 1.0;
        }
        Self {
            dim,
            weights: [eye.clone(), eye.clone(), eye.clone(), eye],
            frozen: [false; 4],
        }
    }

    pub fn from_parts(dim: usize, weights: [Vec<f64>; 4], frozen: [bool; 4]) -> Result<Self> {
        for (slot, w) in Slot::ALL.iter().zip(&weights) {
            if w.len() != dim * dim {
                return Err(Error::DimensionMismatch {
                    declared: dim * dim,
                    actual: w.len(),
                });
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("matrix {slot} has non-finite entries")));
            }
        }
        Ok(Self { dim, weights, frozen })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self, slot: Slot) -> &[f64] {
        &self.weights[slot.index()]
    }

    pub fn matrix_mut(&mut self, slot: Slot) -> &mut [f64] {
        &mut self.weights[slot.index()]
    }

    pub fn is_frozen(&self, slot: Slot) -> bool {
        self.frozen[slot.index()]
    }

    pub fn frozen_flags(&self) -> [bool; 4] {
        self.frozen
    }

    pub fn set_frozen(&mut self, slot: Slot, frozen: bool) {
        self.frozen[slot.index()] = frozen;
    }

    pub fn with_frozen(mut self, flags: [bool; 4]) -> Self {
        self.frozen = flags;
        self
    }

    /// `W_slot · v`, accumulated left to right in `f64`.
    pub fn project(&self, slot: Slot, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.dim, "projection input has wrong dimension");
        self.matrix(slot)
            .chunks_exact(self.dim)
            .map(|row| row.iter().zip(v).fold(0.0, |acc, (w, x)| acc + w * x))
            .collect()
    }

    /// Forward pass of one encoder: `normalize(Σ W_side,m · v_m)` over the supplied modalities.
    ///
    /// Returns the unit vector together with the pre-normalization norm.
    pub fn encode(&self, side: Side, inputs: &[(Modality, &[f64])]) -> Option<(Vec<f64>, f64)> {
        let mut z = vec![0.0; self.dim];
        for (modality, v) in inputs {
            for (acc, p) in z.iter_mut().zip(self.project(Slot::of(side, *modality), v)) {
                *acc += p;
            }
        }
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        for v in &mut z {
            *v /= norm;
        }
        Some((z, norm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_projection_is_bit_exact() {
        let a = ProjectionAdapter::identity(5);
        let v = [0.1, -0.0, 3.5e-9, -2.25, 1.0 / 3.0];
        let p = a.project(Slot::ContextText, &v);
        for (x, y) in v.iter().zip(&p) {
            assert!(x == y);
        }
    }

    #[test]
    fn encode_is_scale_invariant() {
        let mut a = ProjectionAdapter::identity(3);
        a.matrix_mut(Slot::QueryImage).copy_from_slice(&[1.0, 2.0, 0.0, 0.5, -1.0, 0.3, 0.0, 0.0, 2.0]);
        let v = [0.2, 0.5, -0.7];
        let scaled: Vec<f64> = v.iter().map(|x| x * 7.0).collect();
        let (e1, _) = a.encode(Side::Query, &[(Modality::Image, &v)]).unwrap();
        let (e2, _) = a.encode(Side::Query, &[(Modality::Image, &scaled)]).unwrap();
        for (x, y) in e1.iter().zip(&e2) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_projection_is_none() {
        let mut a = ProjectionAdapter::identity(2);
        a.matrix_mut(Slot::QueryImage).fill(0.0);
        assert!(a.encode(Side::Query, &[(Modality::Image, &[1.0, 0.0])]).is_none());
    }
}
