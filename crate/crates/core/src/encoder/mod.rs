//! Encoder model and its inputs.

pub mod config;
pub mod model;
pub mod params;
pub mod posenc;
pub mod sample;

pub use config::{EncoderConfig, HeadMode, Modality};
pub use model::{
    adapter_param_name, is_backbone, is_embedder, is_head, param_specs, Adapter, Encoded, OmniEncoder, ParamSpec,
    BLOCK_LINEARS,
};
pub use params::{Bound, Param, ParamSet};
pub use posenc::{positional_encoding, PosKind};
pub use sample::{batch_modality, ModalityBatch, ModalitySample, Payload};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Linear embeddings `[patches, d]` of one image or spectrogram, without
/// positional terms.
pub fn patchify_embed<F: Float>(sample: &ModalitySample, enc: &OmniEncoder<F>) -> Result<Tensor<F>> {
    let m = sample.modality();
    if m == Modality::Text {
        return Err(Error::Contract("patchify_embed needs an image or audio sample".into()));
    }
    sample.validate(&enc.cfg)?;
    let tape = Tape::new();
    let b = Bound::frozen(&tape, &enc.params);
    let patches = tape.constant(enc.patch_matrix(std::slice::from_ref(sample), m)?);
    let prefix = if m == Modality::Image { "embed.image" } else { "embed.audio" };
    Ok(enc.linear(&b, prefix, patches)?.value())
}

/// Table rows `[L, d]` for a text sample, without positional terms.
pub fn token_embed<F: Float>(sample: &ModalitySample, enc: &OmniEncoder<F>) -> Result<Tensor<F>> {
    let Payload::Text(ids) = &sample.payload else {
        return Err(Error::Contract("token_embed needs a text sample".into()));
    };
    sample.validate(&enc.cfg)?;
    let tape = Tape::new();
    let table = tape.constant(enc.params.get("embed.text.weight")?.clone());
    let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    Ok(table.embedding(&ids)?.value())
}
