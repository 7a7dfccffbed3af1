//! Frozen feature caches for paired corpora.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::features::FeatureCache;
use crate::encoder::{Modality, ModalitySample, OmniEncoder};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Two single-modality caches whose rows line up by pair id.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedFeatureCache {
    pub a: FeatureCache,
    pub b: FeatureCache,
}

impl PairedFeatureCache {
    pub fn new(a: FeatureCache, b: FeatureCache) -> Result<Self> {
        if a.dim != b.dim {
            return Err(Error::Shape(format!("cache widths {} and {} differ", a.dim, b.dim)));
        }
        if a.len() != b.len() || a.rows.iter().zip(&b.rows).any(|(x, y)| x.key != y.key) {
            return Err(Error::Data("paired caches do not list the same pair ids in order".into()));
        }
        Ok(PairedFeatureCache { a, b })
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Row counts per modality.
    pub fn manifest(&self) -> BTreeMap<Modality, usize> {
        let mut m = BTreeMap::new();
        *m.entry(self.a.modality).or_insert(0) += self.a.len();
        *m.entry(self.b.modality).or_insert(0) += self.b.len();
        m
    }

    pub fn side_a(&self) -> Tensor<f32> {
        stack(&self.a)
    }

    pub fn side_b(&self) -> Tensor<f32> {
        stack(&self.b)
    }

    /// Rows at the given positions, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let pick = |c: &FeatureCache| FeatureCache { rows: idx.iter().map(|&i| c.rows[i].clone()).collect(), ..c.clone() };
        PairedFeatureCache { a: pick(&self.a), b: pick(&self.b) }
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.a.write(dir.join("side_a.omnf"))?;
        self.b.write(dir.join("side_b.omnf"))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::new(FeatureCache::read(dir.join("side_a.omnf"))?, FeatureCache::read(dir.join("side_b.omnf"))?)
    }
}

fn stack(c: &FeatureCache) -> Tensor<f32> {
    let data: Vec<f32> = c.rows.iter().flat_map(|r| r.values.iter().copied()).collect();
    Tensor::raw(vec![c.len(), c.dim], data)
}

/// Encodes both halves of a paired corpus with the frozen backbone. Rows
/// are ordered by pair id.
pub fn cache_features<F: Float>(
    enc: &OmniEncoder<F>,
    modality_a: Modality,
    modality_b: Modality,
    corpus: &[ModalitySample],
) -> Result<PairedFeatureCache> {
    if modality_a == modality_b {
        return Err(Error::Contract("paired modalities must differ".into()));
    }
    let mut sides: [BTreeMap<u64, &ModalitySample>; 2] = Default::default();
    for s in corpus {
        let side = match s.modality() {
            m if m == modality_a => 0,
            m if m == modality_b => 1,
            m => return Err(Error::Contract(format!("{m} sample in a {modality_a}-{modality_b} corpus"))),
        };
        let id = s.pair_id.ok_or_else(|| Error::Data(format!("{} sample without a pair_id", s.modality())))?;
        if sides[side].insert(id, s).is_some() {
            return Err(Error::Data(format!("pair_id {id} appears twice for {}", s.modality())));
        }
    }
    for (this, other, m) in [(0, 1, modality_b), (1, 0, modality_a)] {
        if let Some(id) = sides[this].keys().find(|k| !sides[other].contains_key(k)) {
            return Err(Error::Data(format!("pair_id {id} has no {m} half")));
        }
    }
    let d = enc.cfg.embed_dim;
    let mut out = [FeatureCache::new(modality_a, d, true), FeatureCache::new(modality_b, d, true)];
    for (side, cache) in sides.iter().zip(out.iter_mut()) {
        if side.is_empty() {
            continue;
        }
        let samples: Vec<ModalitySample> = side.values().map(|s| (*s).clone()).collect();
        let feats = enc.features(&samples, 128)?.cast::<f32>();
        for (i, s) in samples.iter().enumerate() {
            cache.push(s.pair_id.unwrap_or_default(), s.label, feats.row(i).to_vec())?;
        }
    }
    let [a, b] = out;
    PairedFeatureCache::new(a, b)
}
