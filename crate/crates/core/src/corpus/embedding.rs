//! Dense embedding matrices and the `MICL1` on-disk format.
//!
//! A file is a single JSON header line followed by `count * dim` little-endian
//! `f32` values in row-major order:
//!
//! ```text
//! {"magic":"MICL1","modality":"image","dim":8,"count":3,"keys":["a","b","c"]}\n
//! <96 bytes of payload>
//! ```

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &str = "MICL1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Modality::Image => f.write_str("image"),
            Modality::Text => f.write_str("text"),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    modality: Modality,
    dim: usize,
    count: usize,
    keys: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    encoder: Option<String>,
}

/// Row-major matrix of embeddings addressed by record key.
#[derive(Debug, Clone)]
pub struct EmbeddingMatrix {
    modality: Modality,
    dim: usize,
    keys: Vec<String>,
    rows: Vec<f32>,
    key_index: HashMap<String, usize>,
    encoder: Option<String>,
}

impl PartialEq for EmbeddingMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.modality == other.modality
            && self.dim == other.dim
            && self.keys == other.keys
            && self.encoder == other.encoder
            && self.rows.len() == other.rows.len()
            && self
                .rows
                .iter()
                .zip(&other.rows)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl EmbeddingMatrix {
    /// Builds a matrix, rejecting duplicate keys, ragged payloads and non-finite values.
    pub fn new(
        modality: Modality,
        dim: usize,
        keys: Vec<String>,
        rows: Vec<f32>,
        encoder: Option<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dim must be positive".into()));
        }
        if rows.len() != keys.len() * dim {
            let actual = if keys.is_empty() { rows.len() } else { rows.len() / keys.len() };
            return Err(Error::DimensionMismatch {
                declared: dim,
                actual,
            });
        }
        let mut key_index = HashMap::with_capacity(keys.len());
        for (i, key) in keys.iter().enumerate() {
            if key_index.insert(key.clone(), i).is_some() {
                return Err(Error::DuplicateId(key.clone()));
            }
        }
        for (key, row) in keys.iter().zip(rows.chunks_exact(dim)) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    modality: modality.to_string(),
                    key: key.clone(),
                });
            }
        }
        Ok(Self {
            modality,
            dim,
            keys,
            rows,
            key_index,
            encoder,
        })
    }

    pub fn from_rows(
        modality: Modality,
        dim: usize,
        entries: impl IntoIterator<Item = (String, Vec<f32>)>,
        encoder: Option<String>,
    ) -> Result<Self> {
        let mut keys = Vec::new();
        let mut rows = Vec::new();
        for (key, row) in entries {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    declared: dim,
                    actual: row.len(),
                });
            }
            keys.push(key);
            rows.extend_from_slice(&row);
        }
        Self::new(modality, dim, keys, rows, encoder)
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.keys.len()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn encoder(&self) -> Option<&str> {
        self.encoder.as_deref()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.rows
    }

    pub fn index_of(&self, key: &str) -> Option<usize> {
        self.key_index.get(key).copied()
    }

    pub fn row(&self, key: &str) -> Option<&[f32]> {
        self.index_of(key).map(|i| self.row_at(i))
    }

    pub fn row_at(&self, index: usize) -> &[f32] {
        &self.rows[index * self.dim..(index + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.keys
            .iter()
            .map(String::as_str)
            .zip(self.rows.chunks_exact(self.dim))
    }

    /// Divides every row by its L2 norm (accumulated in `f64`).
    pub fn l2_normalize(&self) -> Result<Self> {
        let mut rows = Vec::with_capacity(self.rows.len());
        for (key, row) in self.iter() {
            let norm = row
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm(key.to_string()));
            }
            rows.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
        }
        Ok(Self {
            rows,
            ..self.clone()
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            magic: EMBEDDING_MAGIC.to_string(),
            modality: self.modality,
            dim: self.dim,
            count: self.count(),
            keys: self.keys.clone(),
            encoder: self.encoder.clone(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(self.rows.len() * 4);
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::CorruptHeader {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| corrupt("no header line"))?;
        let header: Header = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| corrupt(&format!("unparseable header: {e}")))?;
        if header.magic != EMBEDDING_MAGIC {
            return Err(corrupt(&format!("bad magic {:?}", header.magic)));
        }
        if header.keys.len() != header.count {
            return Err(corrupt(&format!(
                "count {} disagrees with {} keys",
                header.count,
                header.keys.len()
            )));
        }
        let payload = &bytes[newline + 1..];
        let expected = header.count * header.dim * 4;
        if payload.len() != expected {
            let floats = payload.len() / 4;
            let divisible = payload.len() % 4 == 0 && header.count > 0 && floats % header.count == 0;
            if payload.len() > expected || (divisible && floats > 0) {
                return Err(Error::DimensionMismatch {
                    declared: header.dim,
                    actual: floats / header.count.max(1),
                });
            }
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected,
                found: payload.len(),
            });
        }
        let rows = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(header.modality, header.dim, header.keys, rows, header.encoder)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn matrix(rows: &[(&str, &[f32])]) -> EmbeddingMatrix {
        let dim = rows.first().map_or(2, |r| r.1.len());
        EmbeddingMatrix::from_rows(
            Modality::Image,
            dim,
            rows.iter().map(|(k, r)| (k.to_string(), r.to_vec())),
            None,
        )
        .unwrap()
    }

    #[test]
    fn normalizes_three_four_five() {
        let m = matrix(&[("a", &[3.0, 4.0])]).l2_normalize().unwrap();
        assert_eq!(m.row("a").unwrap(), &[0.6, 0.8]);
    }

    #[test]
    fn unit_row_is_unchanged() {
        let m = matrix(&[("a", &[1.0, 0.0, 0.0, 0.0])]).l2_normalize().unwrap();
        assert_eq!(m.row("a").unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_row_names_key() {
        let err = matrix(&[("ok", &[1.0, 1.0]), ("dead", &[0.0, 0.0])])
            .l2_normalize()
            .unwrap_err();
        assert!(matches!(err, Error::ZeroNorm(ref k) if k == "dead"), "{err}");
    }

    #[test]
    fn rejects_non_finite() {
        let err = EmbeddingMatrix::from_rows(
            Modality::Text,
            2,
            [("x".to_string(), vec![f32::NAN, 1.0])],
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn flipped_magic_is_corrupt_header() {
        let mut bytes = matrix(&[("a", &[1.0, 2.0])]).to_bytes();
        let pos = bytes.windows(5).position(|w| w == b"MICL1").unwrap();
        bytes[pos] = b'X';
        let err = EmbeddingMatrix::from_bytes(&bytes, &PathBuf::from("m.micl")).unwrap_err();
        assert!(matches!(err, Error::CorruptHeader { .. }), "{err}");
    }

    #[test]
    fn short_payload_is_truncated() {
        let mut bytes = matrix(&[("a", &[1.0, 2.0]), ("b", &[3.0, 4.0])]).to_bytes();
        bytes.truncate(bytes.len() - 3);
        let err = EmbeddingMatrix::from_bytes(&bytes, &PathBuf::from("m.micl")).unwrap_err();
        assert!(matches!(err, Error::Truncated { .. }), "{err}");
    }

    #[test]
    fn payload_for_other_dim_is_dimension_mismatch() {
        let m = matrix(&[("a", &[1.0, 2.0, 3.0, 4.0]), ("b", &[1.0, 2.0, 3.0, 4.0])]);
        let bytes = m.to_bytes();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let with_dim = |dim: &str| {
            let header = String::from_utf8(bytes[..nl].to_vec()).unwrap().replacen("\"dim\":4", dim, 1);
            let mut out = header.into_bytes();
            out.extend_from_slice(&bytes[nl..]);
            out
        };
        let err = EmbeddingMatrix::from_bytes(&with_dim("\"dim\":8"), &PathBuf::from("m.micl")).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { declared: 8, actual: 4 }), "{err}");
        let err = EmbeddingMatrix::from_bytes(&with_dim("\"dim\":2"), &PathBuf::from("m.micl")).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { declared: 2, actual: 4 }), "{err}");
    }

    #[test]
    fn bytes_round_trip_is_bit_exact() {
        let m = matrix(&[("a", &[f32::MIN_POSITIVE, -0.0]), ("b", &[1e-30, 7.5])]);
        let back = EmbeddingMatrix::from_bytes(&m.to_bytes(), &PathBuf::from("m")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), m.to_bytes());
    }
}
