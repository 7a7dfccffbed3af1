//! Unimodal contrastive pretraining.

pub mod augment;
pub mod loss;
pub mod optim;
pub mod schedule;
pub mod train;

pub use augment::{augment, AudioAugment, AugmentationConfig, ImageAugment, TextAugment};
pub use loss::{cosine_similarity, nt_xent_loss, stacked_pairing, ContrastiveConfig};
pub use optim::{adamw_step, OptimizerConfig, OptimizerState};
pub use schedule::{balance_datasets, ModalityScheduler, ScheduleMode, Stores};
pub use train::{contrastive_step_loss, pretrain_to_checkpoint, run_pretraining, LossRecord, PretrainConfig, PretrainOutcome};
