//! Last-block attention maps.

use crate::autodiff::Tape;
use crate::encoder::{batch_modality, Bound, Modality, ModalitySample, OmniEncoder};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Post-softmax attention of one sample in the last block,
/// `[heads, T+1, T+1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub modality: Modality,
    pub tokens: usize,
    pub attention: Tensor<f64>,
}

pub fn attention_records<F: Float>(enc: &OmniEncoder<F>, samples: &[ModalitySample], batch: usize) -> Result<Vec<AttentionRecord>> {
    let m = batch_modality(samples)?;
    let t1 = enc.cfg.tokens(m) + 1;
    let heads = enc.cfg.n_heads;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let tape = Tape::new();
        let b = Bound::frozen(&tape, &enc.params);
        let traced = enc.encode_traced(&b, chunk, true)?;
        let last = traced.attention.last().ok_or_else(|| Error::State("no attention recorded".into()))?;
        for per in last.data().chunks_exact(heads * t1 * t1) {
            out.push(AttentionRecord {
                modality: m,
                tokens: t1 - 1,
                attention: Tensor::raw(vec![heads, t1, t1], per.iter().map(|v| v.to_f64()).collect()),
            });
        }
    }
    Ok(out)
}

/// Mean over records and heads, `[T+1, T+1]`.
pub fn average_attention_map(records: &[AttentionRecord]) -> Result<Tensor<f64>> {
    let first = records.first().ok_or_else(|| Error::Contract("no attention records".into()))?;
    let t1 = first.tokens + 1;
    let mut acc = vec![0.0f64; t1 * t1];
    let mut count = 0usize;
    for r in records {
        let s = r.attention.shape();
        if r.modality != first.modality || r.tokens != first.tokens || s.len() != 3 || s[1] != t1 || s[2] != t1 {
            return Err(Error::Contract("attention records differ in modality or length".into()));
        }
        for head in r.attention.data().chunks_exact(t1 * t1) {
            acc.iter_mut().zip(head).for_each(|(a, v)| *a += v);
            count += 1;
        }
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    Tensor::from_vec(&[t1, t1], acc)
}

/// Largest deviation of any row sum from one.
pub fn max_row_sum_error(map: &Tensor<f64>) -> f64 {
    let t = map.last_dim();
    map.data().chunks_exact(t).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

pub fn attention_csv(map: &Tensor<f64>) -> String {
    let t = map.last_dim();
    let mut s = (0..t).map(|j| format!("k{j}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for row in map.data().chunks_exact(t) {
        s.push_str(&row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_fixture() {
        let t1 = 5;
        let rec = AttentionRecord {
            modality: Modality::Text,
            tokens: t1 - 1,
            attention: Tensor::full(&[2, t1, t1], 1.0 / t1 as f64),
        };
        let avg = average_attention_map(&[rec.clone(), rec]).unwrap();
        assert!(avg.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!(max_row_sum_error(&avg) < 1e-12);
    }

    #[test]
    fn mixed_lengths_rejected() {
        let a = AttentionRecord { modality: Modality::Text, tokens: 1, attention: Tensor::full(&[1, 2, 2], 0.5) };
        let b = AttentionRecord { modality: Modality::Text, tokens: 2, attention: Tensor::full(&[1, 3, 3], 1.0 / 3.0) };
        assert!(matches!(average_attention_map(&[a, b]), Err(Error::Contract(_))));
    }
}
