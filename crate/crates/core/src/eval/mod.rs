//! Frozen-feature evaluation and representation diagnostics.

pub mod attention;
pub mod export;
pub mod knn;
pub mod metrics;

pub use attention::{attention_csv, attention_records, average_attention_map, max_row_sum_error, AttentionRecord};
pub use export::{embedding_csv, export_embeddings_2d, principal_axes, ExportMethod};
pub use knn::{knn_accuracy, knn_classify, DEFAULT_K, DEFAULT_TEMPERATURE};
pub use metrics::{alignment_metric, metric_table, modality_purity, normalize_rows, uniformity_metric, MetricReport};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{batch_modality, ModalitySample, OmniEncoder};
use crate::error::Result;
use crate::pretrain::augment::{augment, AugmentationConfig};
use crate::tensor::Float;

/// Alignment between unit CLS features of each sample and of one augmented
/// view, and uniformity of the unaugmented features.
pub fn representation_metrics<F: Float>(
    enc: &OmniEncoder<F>,
    samples: &[ModalitySample],
    aug: &AugmentationConfig,
    seed: u64,
) -> Result<MetricReport> {
    let m = batch_modality(samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views: Vec<ModalitySample> = samples.iter().map(|s| augment(s, aug, &enc.cfg, &mut rng)).collect();
    let a = normalize_rows(&enc.features(samples, 128)?.to_f64());
    let b = normalize_rows(&enc.features(&views, 128)?.to_f64());
    Ok(MetricReport { modality: m, alignment: alignment_metric(&a, &b)?, uniformity: uniformity_metric(&a)?, samples: samples.len() })
}
