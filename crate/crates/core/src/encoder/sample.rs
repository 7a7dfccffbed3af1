use crate::encoder::config::{EncoderConfig, Modality};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// `3 x H x W`, channel-major, values in `[0, 1]`.
    Image(Vec<f32>),
    /// `1 x H' x W'` log-mel values; rows are time frames.
    Audio(Vec<f32>),
    /// `L` token ids, 0 is padding.
    Text(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySample {
    pub payload: Payload,
    pub label: Option<u32>,
    pub pair_id: Option<u64>,
}

impl ModalitySample {
    pub fn image(pixels: Vec<f32>) -> Self {
        ModalitySample { payload: Payload::Image(pixels), label: None, pair_id: None }
    }

    pub fn audio(bins: Vec<f32>) -> Self {
        ModalitySample { payload: Payload::Audio(bins), label: None, pair_id: None }
    }

    pub fn text(ids: Vec<u32>) -> Self {
        ModalitySample { payload: Payload::Text(ids), label: None, pair_id: None }
    }

    pub fn with_label(mut self, label: u32) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_pair_id(mut self, id: u64) -> Self {
        self.pair_id = Some(id);
        self
    }

    pub fn modality(&self) -> Modality {
        match self.payload {
            Payload::Image(_) => Modality::Image,
            Payload::Audio(_) => Modality::Audio,
            Payload::Text(_) => Modality::Text,
        }
    }

    /// Checks payload dimensions and token ids against `cfg`.
    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        match &self.payload {
            Payload::Image(px) => {
                let want = 3 * cfg.image_size.0 * cfg.image_size.1;
                if px.len() != want {
                    return Err(Error::Shape(format!("image payload has {} values, expected {want}", px.len())));
                }
            }
            Payload::Audio(bins) => {
                let want = cfg.audio_size.0 * cfg.audio_size.1;
                if bins.len() != want {
                    return Err(Error::Shape(format!("audio payload has {} values, expected {want}", bins.len())));
                }
            }
            Payload::Text(ids) => {
                if ids.len() != cfg.text_len {
                    return Err(Error::Shape(format!(
                        "text payload has {} tokens, expected {}",
                        ids.len(),
                        cfg.text_len
                    )));
                }
                if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab_size) {
                    return Err(Error::Data(format!("token id {bad} >= vocab_size {}", cfg.vocab_size)));
                }
            }
        }
        Ok(())
    }
}

/// Samples that all share one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBatch {
    modality: Modality,
    samples: Vec<ModalitySample>,
}

impl ModalityBatch {
    pub fn new(samples: Vec<ModalitySample>) -> Result<Self> {
        let modality = batch_modality(&samples)?;
        Ok(ModalityBatch { modality, samples })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn samples(&self) -> &[ModalitySample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn into_samples(self) -> Vec<ModalitySample> {
        self.samples
    }
}

/// The single modality shared by `samples`.
pub fn batch_modality(samples: &[ModalitySample]) -> Result<Modality> {
    let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?.modality();
    if let Some(other) = samples.iter().map(|s| s.modality()).find(|&m| m != first) {
        return Err(Error::Contract(format!("mixed-modality batch: {first} and {other}")));
    }
    Ok(first)
}
