//! Contrastive objective over paired augmented views.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Float;

/// Logit given to self-similarities; far enough below any `cos/τ` that its
/// softmax weight underflows to exactly zero.
pub const SELF_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Samples per modality batch; each contributes two views.
    pub batch_size: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig { temperature: 0.05, batch_size: 64 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok(u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv))
}

/// Partner map for views stacked as `[view1 (n rows); view2 (n rows)]`.
pub fn stacked_pairing(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect()
}

/// NT-Xent: mean over all `2N` anchors of
/// `-log( exp(s_ij/τ) / Σ_{k≠i} exp(s_ik/τ) )`, where `j = pairing[i]`.
pub fn nt_xent_loss<'t, F: Float>(z: Var<'t, F>, pairing: &[usize], temperature: f64) -> Result<Var<'t, F>> {
    let shape = z.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("embeddings must be [2N, p], got {shape:?}")));
    }
    let rows = shape[0];
    if rows < 2 || rows % 2 != 0 {
        return Err(Error::Contract(format!("NT-Xent needs an even number of at least 2 views, got {rows}")));
    }
    if pairing.len() != rows {
        return Err(Error::Contract(format!("pairing covers {} rows, embeddings have {rows}", pairing.len())));
    }
    for (i, &j) in pairing.iter().enumerate() {
        if j >= rows || j == i || pairing[j] != i {
            return Err(Error::Contract(format!("row {i} has an invalid partner {j}")));
        }
    }
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
    }
    let zn = z.l2_normalize();
    let logits = zn.matmul_t(zn)?.scale(F::from_f64(1.0 / temperature));
    let diag: Vec<bool> = (0..rows * rows).map(|k| k / rows == k % rows).collect();
    logits.mask_fill(&diag, F::from_f64(SELF_LOGIT))?.cross_entropy(pairing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn two_pair_example() {
        let tape = Tape::<f64>::new();
        let z = tape.var(Tensor::from_vec(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap());
        let l = nt_xent_loss(z, &stacked_pairing(2), 0.5).unwrap().item();
        let e2 = 2f64.exp();
        assert!((l - (-(e2 / (e2 + 2.0)).ln())).abs() < 1e-12);
        assert!((l - 0.2395).abs() < 1e-4);
    }

    #[test]
    fn single_pair_is_zero() {
        let tape = Tape::<f64>::new();
        let z = tape.var(Tensor::from_vec(&[2, 3], vec![0.3, -1.0, 2.0, 5.0, 0.1, 0.0]).unwrap());
        assert_eq!(nt_xent_loss(z, &stacked_pairing(1), 0.05).unwrap().item(), 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let tape = Tape::<f64>::new();
        let one = tape.var(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(nt_xent_loss(one, &[0], 0.05), Err(Error::Contract(_))));
        let z = tape.var(Tensor::from_vec(&[4, 2], vec![1.0; 8]).unwrap());
        assert!(nt_xent_loss(z, &[1, 0, 2, 3], 0.05).is_err());
    }
}
