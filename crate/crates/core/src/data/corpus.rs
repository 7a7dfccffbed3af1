//! Sample corpora stored in the checkpoint container.
//!
//! Per modality present: `<m>.values` (pixels/bins as f32 or token ids as
//! i64), `<m>.label`, `<m>.pair_id` (both i64, `-1` when absent) and
//! `<m>.order`, the original position of each sample.

use std::path::Path;

use crate::data::checkpoint::{Checkpoint, Entry};
use crate::encoder::{Modality, ModalitySample, Payload};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn corpus_to_checkpoint(samples: &[ModalitySample]) -> Result<Checkpoint> {
    let mut ck = Checkpoint::default();
    ck.meta.insert("kind".into(), "corpus".into());
    ck.meta.insert("count".into(), samples.len().to_string());
    for m in Modality::ALL {
        let rows: Vec<(usize, &ModalitySample)> = samples.iter().enumerate().filter(|(_, s)| s.modality() == m).collect();
        if rows.is_empty() {
            continue;
        }
        let values = match m {
            Modality::Text => Entry::I64(
                rows.iter()
                    .flat_map(|(_, s)| match &s.payload {
                        Payload::Text(ids) => ids.iter().map(|&i| i as i64).collect::<Vec<_>>(),
                        _ => unreachable!(),
                    })
                    .collect(),
            ),
            _ => {
                let width = payload_f32(rows[0].1).len();
                let mut data = Vec::with_capacity(rows.len() * width);
                for (_, s) in &rows {
                    let v = payload_f32(s);
                    if v.len() != width {
                        return Err(Error::Shape(format!("{m} samples of differing sizes")));
                    }
                    data.extend_from_slice(v);
                }
                Entry::F32(Tensor::from_vec(&[rows.len(), width], data)?)
            }
        };
        ck.entries.insert(format!("{m}.values"), values);
        ck.entries.insert(format!("{m}.label"), Entry::I64(rows.iter().map(|(_, s)| s.label.map_or(-1, i64::from)).collect()));
        ck.entries.insert(
            format!("{m}.pair_id"),
            Entry::I64(rows.iter().map(|(_, s)| s.pair_id.map_or(-1, |p| p as i64)).collect()),
        );
        ck.entries.insert(format!("{m}.order"), Entry::I64(rows.iter().map(|(i, _)| *i as i64).collect()));
    }
    Ok(ck)
}

fn payload_f32(s: &ModalitySample) -> &[f32] {
    match &s.payload {
        Payload::Image(v) | Payload::Audio(v) => v,
        Payload::Text(_) => &[],
    }
}

pub fn corpus_from_checkpoint(ck: &Checkpoint) -> Result<Vec<ModalitySample>> {
    if ck.meta.get("kind").map(String::as_str) != Some("corpus") {
        return Err(Error::Data("file does not hold a corpus".into()));
    }
    let count: usize = ck.meta.get("count").and_then(|c| c.parse().ok()).ok_or_else(|| Error::Data("corpus lacks a count".into()))?;
    let mut slots: Vec<Option<ModalitySample>> = vec![None; count];
    let ints = |name: &str| -> Result<&Vec<i64>> {
        match ck.entries.get(name) {
            Some(Entry::I64(v)) => Ok(v),
            _ => Err(Error::Data(format!("corpus lacks integer entry `{name}`"))),
        }
    };
    for m in Modality::ALL {
        if !ck.entries.contains_key(&format!("{m}.values")) {
            continue;
        }
        let (labels, pairs, order) = (ints(&format!("{m}.label"))?, ints(&format!("{m}.pair_id"))?, ints(&format!("{m}.order"))?);
        let n = order.len();
        let payloads: Vec<Payload> = match (m, &ck.entries[&format!("{m}.values")]) {
            (Modality::Text, Entry::I64(ids)) if n > 0 && ids.len() % n == 0 => ids
                .chunks_exact(ids.len() / n)
                .map(|c| c.iter().map(|&i| u32::try_from(i).map_err(|_| Error::Data("bad token id".into()))).collect())
                .map(|r: Result<Vec<u32>>| r.map(Payload::Text))
                .collect::<Result<_>>()?,
            (Modality::Image | Modality::Audio, Entry::F32(t)) if t.rows() == n => (0..n)
                .map(|i| if m == Modality::Image { Payload::Image(t.row(i).to_vec()) } else { Payload::Audio(t.row(i).to_vec()) })
                .collect(),
            _ => return Err(Error::Data(format!("malformed `{m}.values`"))),
        };
        if labels.len() != n || pairs.len() != n {
            return Err(Error::Data(format!("{m} columns differ in length")));
        }
        for (i, payload) in payloads.into_iter().enumerate() {
            let slot = usize::try_from(order[i]).ok().filter(|&o| o < count).ok_or_else(|| Error::Data("bad order entry".into()))?;
            let s = ModalitySample {
                payload,
                label: u32::try_from(labels[i]).ok(),
                pair_id: u64::try_from(pairs[i]).ok(),
            };
            if slots[slot].replace(s).is_some() {
                return Err(Error::Data(format!("two samples claim position {slot}")));
            }
        }
    }
    slots.into_iter().enumerate().map(|(i, s)| s.ok_or_else(|| Error::Data(format!("no sample at position {i}")))).collect()
}

pub fn save_corpus(path: impl AsRef<Path>, samples: &[ModalitySample]) -> Result<()> {
    corpus_to_checkpoint(samples)?.write(path)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<ModalitySample>> {
    corpus_from_checkpoint(&Checkpoint::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mixed_corpus_round_trip() {
        let samples = vec![
            ModalitySample::text(vec![1, 2, 0]).with_label(1).with_pair_id(7),
            ModalitySample::image(vec![0.5; 12]).with_pair_id(7),
            ModalitySample::text(vec![9, 0, 0]),
            ModalitySample::audio(vec![0.25; 4]).with_label(0),
        ];
        let ck = corpus_to_checkpoint(&samples).unwrap();
        let back = corpus_from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, samples);
        assert_eq!(corpus_from_checkpoint(&corpus_to_checkpoint(&[]).unwrap()).unwrap(), vec![]);
    }
}
