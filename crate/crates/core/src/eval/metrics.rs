//! Alignment and uniformity of unit-norm representations, and modality
//! centroid purity.

use std::fmt::Write as _;

use crate::encoder::Modality;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const NORM_TOL: f64 = 1e-3;

fn check_unit(x: &Tensor<f64>, what: &str) -> Result<()> {
    for i in 0..x.rows() {
        let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_TOL {
            return Err(Error::Contract(format!("{what} row {i} has norm {n}, expected unit vectors")));
        }
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Row-wise unit normalization; zero rows are left as they are.
pub fn normalize_rows(x: &Tensor<f64>) -> Tensor<f64> {
    let mut out = x.clone();
    let d = x.last_dim();
    for row in out.data_mut().chunks_exact_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Mean of `||a_i - b_i||²` over positive pairs.
pub fn alignment_metric(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::Shape(format!("pair tensors {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.rows() == 0 {
        return Err(Error::Contract("alignment needs at least one pair".into()));
    }
    check_unit(a, "anchor")?;
    check_unit(b, "positive")?;
    Ok((0..a.rows()).map(|i| sq_dist(a.row(i), b.row(i))).sum::<f64>() / a.rows() as f64)
}

/// `log` of the mean of `exp(-2 ||x_i - x_j||²)` over ordered pairs `i ≠ j`.
pub fn uniformity_metric(x: &Tensor<f64>) -> Result<f64> {
    let n = x.rows();
    if x.shape().len() != 2 || n < 2 {
        return Err(Error::Contract("uniformity needs at least two vectors".into()));
    }
    check_unit(x, "feature")?;
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += 2.0 * (-2.0 * sq_dist(x.row(i), x.row(j))).exp();
        }
    }
    Ok((total / (n * (n - 1)) as f64).ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub modality: Modality,
    pub alignment: f64,
    pub uniformity: f64,
    pub samples: usize,
}

pub fn metric_table(reports: &[MetricReport]) -> String {
    let mut s = String::from("modality,alignment,uniformity,samples\n");
    for r in reports {
        let _ = writeln!(s, "{},{},{},{}", r.modality, r.alignment, r.uniformity, r.samples);
    }
    s
}

/// Fraction of embeddings whose nearest modality centroid (Euclidean) is
/// their own modality's.
pub fn modality_purity(groups: &[(Modality, Tensor<f64>)]) -> Result<f64> {
    if groups.len() < 2 || groups.iter().any(|(_, x)| x.rows() == 0) {
        return Err(Error::Contract("purity needs at least two non-empty modality groups".into()));
    }
    let d = groups[0].1.last_dim();
    let centroids: Vec<Vec<f64>> = groups
        .iter()
        .map(|(_, x)| {
            let mut c = vec![0.0; d];
            for i in 0..x.rows() {
                c.iter_mut().zip(x.row(i)).for_each(|(a, b)| *a += b);
            }
            c.iter().map(|v| v / x.rows() as f64).collect()
        })
        .collect();
    let (mut hit, mut total) = (0usize, 0usize);
    for (g, (_, x)) in groups.iter().enumerate() {
        for i in 0..x.rows() {
            let mut best = 0;
            for c in 1..centroids.len() {
                if sq_dist(x.row(i), &centroids[c]) < sq_dist(x.row(i), &centroids[best]) {
                    best = c;
                }
            }
            hit += usize::from(best == g);
            total += 1;
        }
    }
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trivial_anchors() {
        let u = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(alignment_metric(&u, &u).unwrap(), 0.0);
        let v = Tensor::from_vec(&[2, 2], vec![-1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(alignment_metric(&u, &v).unwrap(), 4.0);
        assert_eq!(uniformity_metric(&u).unwrap(), -8.0);
        let same = Tensor::from_vec(&[2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap();
        assert_eq!(uniformity_metric(&same).unwrap(), 0.0);
    }

    #[test]
    fn rejects_unnormalized_and_tiny_inputs() {
        let x = Tensor::from_vec(&[2, 2], vec![2.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(matches!(alignment_metric(&x, &x), Err(Error::Contract(_))));
        let one = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(uniformity_metric(&one), Err(Error::Contract(_))));
    }

    #[test]
    fn purity_of_separated_clusters() {
        let a = Tensor::from_vec(&[2, 2], vec![10.0, 0.0, 11.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![0.0, 10.0, 0.0, 9.0]).unwrap();
        assert_eq!(modality_purity(&[(Modality::Image, a), (Modality::Text, b)]).unwrap(), 1.0);
    }
}
