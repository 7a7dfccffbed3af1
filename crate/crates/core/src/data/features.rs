//! `OMNF` feature-cache files: one modality of frozen CLS features per file.
//!
//! Header lines: `modality`, `dim`, `rows`, `has_label`, `has_pair_id`,
//! `payload_sha256`, then a `header_sha256` seal. Each row is a `u64` key (pair id or row index), an
//! `i64` label (`-1` when absent) and `dim` little-endian `f32` values.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::checkpoint::{read_preamble, seal_header};
use crate::encoder::params::hex;
use crate::encoder::Modality;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"OMNF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub key: u64,
    pub label: Option<u32>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub modality: Modality,
    pub dim: usize,
    /// Whether `key` carries a pair id rather than a row index.
    pub keyed_by_pair: bool,
    pub rows: Vec<FeatureRow>,
}

impl FeatureCache {
    pub fn new(modality: Modality, dim: usize, keyed_by_pair: bool) -> Self {
        FeatureCache { modality, dim, keyed_by_pair, rows: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, key: u64, label: Option<u32>, values: Vec<f32>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::Shape(format!("feature row of {} values, cache dim {}", values.len(), self.dim)));
        }
        self.rows.push(FeatureRow { key, label, values });
        Ok(())
    }

    pub fn labels(&self) -> Option<Vec<u32>> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.rows.len() * (16 + 4 * self.dim));
        for r in &self.rows {
            payload.extend_from_slice(&r.key.to_le_bytes());
            payload.extend_from_slice(&r.label.map_or(-1i64, i64::from).to_le_bytes());
            for v in &r.values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let has_label = !self.rows.is_empty() && self.rows.iter().all(|r| r.label.is_some());
        let mut header = format!(
            "modality {}\ndim {}\nrows {}\nhas_label {}\nhas_pair_id {}\npayload_sha256 {}\n",
            self.modality,
            self.dim,
            self.rows.len(),
            u8::from(has_label),
            u8::from(self.keyed_by_pair),
            hex(&Sha256::digest(&payload))
        );
        seal_header(&mut header);
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, start) = read_preamble(bytes, FEATURE_MAGIC, FEATURE_VERSION)?;
        let mut fields = std::collections::HashMap::new();
        for line in header.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once(' ').ok_or_else(|| Error::format(16, format!("malformed header line `{line}`")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::format(16, format!("header lacks `{k}`")));
        let num = |k: &str| -> Result<usize> { get(k)?.parse().map_err(|_| Error::format(16, format!("bad `{k}`"))) };
        let modality: Modality = get("modality")?.parse().map_err(|_| Error::format(16, "bad modality"))?;
        let dim = num("dim")?;
        let rows = num("rows")?;
        let keyed_by_pair = num("has_pair_id")? == 1;
        let payload = &bytes[start..];
        let row_bytes = 16 + 4 * dim;
        let expected = rows.checked_mul(row_bytes).ok_or_else(|| Error::format(16, "row count overflows"))?;
        if payload.len() != expected {
            return Err(Error::format(
                start + payload.len().min(expected),
                format!("payload is {} bytes, {rows} rows need {expected}", payload.len()),
            ));
        }
        if hex(&Sha256::digest(payload)) != get("payload_sha256")? {
            return Err(Error::format(start, "payload checksum mismatch"));
        }
        let rows = payload
            .chunks_exact(row_bytes)
            .map(|c| {
                let key = u64::from_le_bytes(c[..8].try_into().unwrap());
                let label = i64::from_le_bytes(c[8..16].try_into().unwrap());
                let values = c[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
                FeatureRow { key, label: u32::try_from(label).ok(), values }
            })
            .collect();
        Ok(FeatureCache { modality, dim, keyed_by_pair, rows })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_round_trip() {
        let c = FeatureCache::new(Modality::Audio, 4, true);
        assert_eq!(FeatureCache::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn rows_keep_order_and_labels() {
        let mut c = FeatureCache::new(Modality::Text, 2, false);
        c.push(5, Some(1), vec![0.5, -1.0]).unwrap();
        c.push(2, None, vec![3.0, 4.0]).unwrap();
        c.push(9, Some(0), vec![-0.0, 1e-30]).unwrap();
        let back = FeatureCache::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.rows.iter().map(|r| r.key).collect::<Vec<_>>(), vec![5, 2, 9]);
        assert!(c.push(1, None, vec![1.0]).is_err());
    }

    #[test]
    fn corruption_is_detected() {
        let mut c = FeatureCache::new(Modality::Image, 3, true);
        c.push(0, Some(2), vec![1.0, 2.0, 3.0]).unwrap();
        let mut bytes = c.to_bytes();
        let n = bytes.len();
        bytes[n - 2] ^= 0x40;
        assert!(FeatureCache::from_bytes(&bytes).unwrap_err().to_string().contains("checksum"));
        assert!(FeatureCache::from_bytes(&c.to_bytes()[..n - 1]).is_err());
        let clean = c.to_bytes();
        for i in 0..n {
            let mut bad = clean.clone();
            bad[i] ^= 0x01;
            assert!(FeatureCache::from_bytes(&bad).is_err(), "byte {i}");
        }
    }
}
