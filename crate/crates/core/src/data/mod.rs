//! Synthetic corpora, tokenizer and on-disk formats.

pub mod checkpoint;
pub mod corpus;
pub mod features;
pub mod synth;
pub mod tokenizer;

pub use checkpoint::{Checkpoint, Entry};
pub use corpus::{load_corpus, save_corpus};
pub use features::{FeatureCache, FeatureRow};
pub use synth::{
    generate_corpus, generate_paired_corpus, train_test_split, CaptionGrammar, PairedCorpusSpec, SyntheticCorpusSpec,
};
pub use tokenizer::{tokenize_text, MASK_ID, PAD_ID, VOCAB_SIZE};

use std::io::Write;
use std::path::Path;

use crate::encoder::{ModalitySample, Payload};
use crate::error::Result;

/// Writes `index,modality,label,pair_id` lines with a header.
pub fn write_manifest(path: impl AsRef<Path>, samples: &[ModalitySample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "index,modality,label,pair_id")?;
    for (i, s) in samples.iter().enumerate() {
        let label = s.label.map(|l| l.to_string()).unwrap_or_default();
        let pair = s.pair_id.map(|l| l.to_string()).unwrap_or_default();
        writeln!(f, "{i},{},{label},{pair}", s.modality())?;
    }
    Ok(())
}

/// Flattened raw payload as f64, for raw-input baselines.
pub fn raw_features(s: &ModalitySample, vocab: usize) -> Vec<f64> {
    match &s.payload {
        Payload::Image(v) | Payload::Audio(v) => v.iter().map(|&x| x as f64).collect(),
        Payload::Text(ids) => {
            let mut counts = vec![0.0; vocab];
            for &i in ids {
                counts[i as usize] += 1.0;
            }
            counts
        }
    }
}
