//! Weighted k-nearest-neighbour classification on frozen features.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

fn unit_rows<F: Float>(x: &Tensor<F>) -> Vec<Vec<f64>> {
    (0..x.rows())
        .map(|i| {
            let r: Vec<f64> = x.row(i).iter().map(|v| v.to_f64()).collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                r
            }
        })
        .collect()
}

/// Cosine kNN vote weighted by `exp(sim / temperature)`. `k` is capped at
/// the training-set size. Equal similarities prefer the earlier training
/// row; equal votes prefer the lowest class id.
pub fn knn_classify<F: Float>(
    train: &Tensor<F>,
    train_labels: &[u32],
    queries: &Tensor<F>,
    k: usize,
    temperature: f64,
) -> Result<Vec<u32>> {
    if train.shape().len() != 2 || train.rows() == 0 || train_labels.is_empty() {
        return Err(Error::Contract("kNN needs a non-empty training set".into()));
    }
    if train.rows() != train_labels.len() {
        return Err(Error::Shape(format!("{} training rows, {} labels", train.rows(), train_labels.len())));
    }
    if queries.last_dim() != train.last_dim() {
        return Err(Error::Shape(format!("query width {} vs train width {}", queries.last_dim(), train.last_dim())));
    }
    if k == 0 || !(temperature > 0.0) {
        return Err(Error::Contract("k and temperature must be positive".into()));
    }
    let k = k.min(train.rows());
    let classes = *train_labels.iter().max().unwrap() as usize + 1;
    let tr = unit_rows(train);
    let mut out = Vec::with_capacity(queries.rows());
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(tr.len());
    for q in unit_rows(queries) {
        sims.clear();
        sims.extend(tr.iter().enumerate().map(|(j, t)| (q.iter().zip(t).map(|(a, b)| a * b).sum::<f64>(), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < sims.len() {
            sims.select_nth_unstable_by(k - 1, cmp);
        }
        let mut votes = vec![0.0f64; classes];
        for &(s, j) in &sims[..k] {
            votes[train_labels[j] as usize] += (s / temperature).exp();
        }
        let mut best = 0;
        for c in 1..classes {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        out.push(best as u32);
    }
    Ok(out)
}

pub fn knn_accuracy<F: Float>(train: &Tensor<F>, train_labels: &[u32], queries: &Tensor<F>, labels: &[u32]) -> Result<f64> {
    let pred = knn_classify(train, train_labels, queries, DEFAULT_K, DEFAULT_TEMPERATURE)?;
    Ok(crate::adapt::probe::accuracy(&pred, labels))
}
