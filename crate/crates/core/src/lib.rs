//! Unified multimodal Transformer encoder.
//!
//! One dense backbone consumes image patches, spectrogram patches and byte
//! tokens. It is pretrained with per-modality contrastive learning and
//! evaluated through linear probes, sparse standard-basis adapters,
//! cross-modal alignment and representation diagnostics.

pub mod adapt;
pub mod align;
pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod pretrain;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use encoder::{EncoderConfig, HeadMode, Modality, ModalitySample, OmniEncoder};
pub use error::{Error, Result};
pub use tensor::{DType, Float, Tensor};
