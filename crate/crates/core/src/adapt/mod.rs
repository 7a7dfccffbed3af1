//! Downstream adaptation: linear probes and sparse basis adapters.

pub mod probe;
pub mod sbora;

pub use probe::{fit_probe, train_linear_probe, LinearProbeHead, ProbeConfig, ProbeOutcome};
pub use sbora::{
    attach_sbora, count_trainable_fraction, delta_weight, finetune_sbora, merge_sbora, sbora_fraction, target_layers,
    FinetuneOutcome,
};
