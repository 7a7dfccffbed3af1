//! Per-modality stores, dataset balancing and the modality-separated
//! minibatch scheduler.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoder::{Modality, ModalityBatch, ModalitySample};
use crate::error::{Error, Result};

/// One sample store per modality, indexed by [`Modality::index`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Stores {
    stores: [Vec<ModalitySample>; 3],
}

impl Stores {
    pub fn new(image: Vec<ModalitySample>, audio: Vec<ModalitySample>, text: Vec<ModalitySample>) -> Result<Self> {
        let s = Stores { stores: [image, audio, text] };
        for m in Modality::ALL {
            if let Some(bad) = s.get(m).iter().find(|x| x.modality() != m) {
                return Err(Error::Data(format!("{} sample in the {m} store", bad.modality())));
            }
        }
        Ok(s)
    }

    pub fn get(&self, m: Modality) -> &[ModalitySample] {
        &self.stores[m.index()]
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.stores[0].len(), self.stores[1].len(), self.stores[2].len()]
    }
}

/// Downsamples every store without replacement to `min(target, size)`,
/// keeping the original relative order.
pub fn balance_datasets(stores: &Stores, target: usize, rng: &mut impl Rng) -> Stores {
    let mut out = Stores::default();
    for m in Modality::ALL {
        let src = stores.get(m);
        out.stores[m.index()] = if src.len() <= target {
            src.to_vec()
        } else {
            let mut idx = sample(rng, src.len(), target).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| src[i].clone()).collect()
        };
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    /// image → audio → text → image ...
    Cyclic,
    /// Uniformly random modality per batch.
    Random,
}

/// Hands out single-modality minibatches. Within a modality, samples are
/// drawn without replacement until fewer than `batch_size` remain, at
/// which point that modality's order is reshuffled.
#[derive(Debug, Clone)]
pub struct ModalityScheduler {
    pub mode: ScheduleMode,
    pub batch_size: usize,
    next: usize,
    order: [Vec<usize>; 3],
    cursor: [usize; 3],
}

impl ModalityScheduler {
    pub fn new(mode: ScheduleMode, batch_size: usize) -> Self {
        ModalityScheduler { mode, batch_size, next: 0, order: Default::default(), cursor: [0; 3] }
    }

    /// Batches in one pass over all stores.
    pub fn steps_per_epoch(&self, stores: &Stores) -> usize {
        stores.sizes().iter().map(|&n| n / self.batch_size.max(1)).sum()
    }

    pub fn next_modality(&mut self, rng: &mut impl Rng) -> Modality {
        match self.mode {
            ScheduleMode::Cyclic => {
                let m = Modality::ALL[self.next % 3];
                self.next += 1;
                m
            }
            ScheduleMode::Random => Modality::ALL[rng.random_range(0..3)],
        }
    }

    pub fn sample_modality_minibatch(&mut self, stores: &Stores, rng: &mut impl Rng) -> Result<ModalityBatch> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        for m in Modality::ALL {
            let n = stores.get(m).len();
            if n == 0 {
                return Err(Error::Data(format!("{m} store is empty")));
            }
            if n < self.batch_size {
                return Err(Error::Data(format!("{m} store has {n} samples, batch size is {}", self.batch_size)));
            }
        }
        let m = self.next_modality(rng);
        let store = stores.get(m);
        let i = m.index();
        if self.order[i].len() != store.len() || self.cursor[i] + self.batch_size > store.len() {
            let mut perm: Vec<usize> = (0..store.len()).collect();
            perm.shuffle(rng);
            self.order[i] = perm;
            self.cursor[i] = 0;
        }
        let picked = &self.order[i][self.cursor[i]..self.cursor[i] + self.batch_size];
        self.cursor[i] += self.batch_size;
        ModalityBatch::new(picked.iter().map(|&j| store[j].clone()).collect())
    }
}
