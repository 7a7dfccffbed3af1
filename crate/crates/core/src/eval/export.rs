//! Two-dimensional embedding export.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::encoder::Modality;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportMethod {
    Pca,
    Raw,
}

impl std::str::FromStr for ExportMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(ExportMethod::Pca),
            "raw" => Ok(ExportMethod::Raw),
            _ => Err(Error::Config(format!("unknown export method `{s}`"))),
        }
    }
}

/// Principal axes of the centered covariance, strongest first, each with
/// its largest-magnitude loading made positive.
pub fn principal_axes(x: &Tensor<f64>) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let (n, d) = (x.rows(), x.last_dim());
    if x.shape().len() != 2 || n < 2 {
        return Err(Error::Contract("PCA needs at least two vectors".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| x.row(i)[j] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    if values[0] <= 1e-12 {
        return Err(Error::Numeric("zero-variance data has no principal axes".into()));
    }
    let axes = order
        .iter()
        .map(|&k| {
            let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let lead = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|a| *a = -*a);
            }
            v
        })
        .collect();
    Ok((values, axes))
}

/// PCA: centered projection onto the top two axes `[n, 2]`. Raw: the
/// input unchanged.
pub fn export_embeddings_2d(x: &Tensor<f64>, method: ExportMethod) -> Result<Tensor<f64>> {
    match method {
        ExportMethod::Raw => Ok(x.clone()),
        ExportMethod::Pca => {
            let (_, axes) = principal_axes(x)?;
            let (n, d) = (x.rows(), x.last_dim());
            let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64).collect();
            let mut out = Vec::with_capacity(2 * n);
            for i in 0..n {
                for axis in axes.iter().take(2) {
                    out.push(x.row(i).iter().zip(&mean).zip(axis).map(|((v, m), a)| (v - m) * a).sum());
                }
                if d < 2 {
                    out.push(0.0);
                }
            }
            Tensor::from_vec(&[n, 2], out)
        }
    }
}

/// `x,y,modality,label` for PCA output, `v0..v{d-1},modality,label`
/// otherwise.
pub fn embedding_csv(points: &Tensor<f64>, modalities: &[Modality], labels: &[Option<u32>]) -> Result<String> {
    let n = points.rows();
    if modalities.len() != n || labels.len() != n {
        return Err(Error::Shape(format!("{n} points, {} modalities, {} labels", modalities.len(), labels.len())));
    }
    let d = points.last_dim();
    let cols: Vec<String> = if d == 2 { vec!["x".into(), "y".into()] } else { (0..d).map(|j| format!("v{j}")).collect() };
    let mut s = cols.join(",");
    s.push_str(",modality,label\n");
    for i in 0..n {
        for v in points.row(i) {
            let _ = write!(s, "{v},");
        }
        let _ = writeln!(s, "{},{}", modalities[i], labels[i].map_or(String::new(), |l| l.to_string()));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_points_keep_distances() {
        let x = Tensor::from_vec(&[4, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, 0.0, -3.0, 1.0, 0.0, 2.0, -1.0, 0.0]).unwrap();
        let y = export_embeddings_2d(&x, ExportMethod::Pca).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d0: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                let d1: f64 = y.row(i).iter().zip(y.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                assert!((d0 - d1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn constant_data_is_numeric_error() {
        let x = Tensor::full(&[3, 2], 1.5);
        assert!(matches!(export_embeddings_2d(&x, ExportMethod::Pca), Err(Error::Numeric(_))));
    }
}
