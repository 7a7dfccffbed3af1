//! Cross-modal alignment of frozen backbone features.

pub mod cache;
pub mod head;

pub use cache::{cache_features, PairedFeatureCache};
pub use head::{
    class_prompt_samples, class_retrieval_at_k, nearest_class, retrieval_at_k, symmetric_info_nce, train_alignment, zero_shot_classify,
    AlignConfig, AlignmentHead, Side, INIT_LOGIT_SCALE, MAX_LOGIT_SCALE,
};
