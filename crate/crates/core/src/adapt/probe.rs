//! Linear probing on frozen CLS features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::encoder::{OmniEncoder, ParamSet};
use crate::error::{Error, Result};
use crate::pretrain::optim::{adamw_step, OptimizerConfig, OptimizerState};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    /// lr 1e-4, wd 0.1, 10 warmup epochs, min lr 1e-5, 40 epochs.
    fn default() -> Self {
        ProbeConfig { optimizer: OptimizerConfig::new(1e-4, 1e-5, 0.1, 10, 40), batch_size: 16 }
    }
}

/// `logits = x · weight + bias`, weight `[d, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbeHead {
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

impl LinearProbeHead {
    pub fn zeros(d: usize, classes: usize) -> Self {
        LinearProbeHead { weight: Tensor::zeros(&[d, classes]), bias: Tensor::zeros(&[classes]) }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<u32>> {
        let (d, k) = (self.weight.shape()[0], self.classes());
        if x.last_dim() != d {
            return Err(Error::Shape(format!("features of width {}, probe expects {d}", x.last_dim())));
        }
        Ok((0..x.rows())
            .map(|i| {
                let row = x.row(i);
                let mut best = (0u32, f32::NEG_INFINITY);
                for c in 0..k {
                    let s = self.bias.data()[c] + row.iter().enumerate().map(|(j, v)| v * self.weight.data()[j * k + c]).sum::<f32>();
                    if s > best.1 {
                        best = (c as u32, s);
                    }
                }
                best.0
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor<f32>, labels: &[u32]) -> Result<f64> {
        Ok(accuracy(&self.predict(x)?, labels))
    }
}

pub fn accuracy(pred: &[u32], labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// Class count implied by `labels`; fewer than two distinct labels is a
/// data error.
pub fn class_count(labels: &[u32]) -> Result<usize> {
    let mut seen: Vec<u32> = labels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(Error::Data(format!("degenerate labels: {} distinct class(es)", seen.len())));
    }
    Ok(*seen.last().unwrap() as usize + 1)
}

/// Cross-entropy training of a linear head on fixed features.
pub fn fit_probe(x: &Tensor<f32>, labels: &[u32], classes: usize, cfg: &ProbeConfig, seed: u64) -> Result<LinearProbeHead> {
    cfg.optimizer.validate()?;
    if x.shape().len() != 2 || x.rows() != labels.len() {
        return Err(Error::Shape(format!("features {:?} vs {} labels", x.shape(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= classes) {
        return Err(Error::Data(format!("label {bad} outside {classes} classes")));
    }
    let n = labels.len();
    let d = x.last_dim();
    let bs = cfg.batch_size.clamp(1, n);
    let steps_per_epoch = n.div_ceil(bs);
    let mut head = ParamSet::<f32>::new();
    head.insert("probe.weight", Tensor::zeros(&[d, classes]));
    head.insert("probe.bias", Tensor::zeros(&[classes]));
    let mut opt = OptimizerState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..cfg.optimizer.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let mut xb = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                xb.extend_from_slice(x.row(i));
            }
            let yb: Vec<usize> = chunk.iter().map(|&i| labels[i] as usize).collect();
            let tape = Tape::new();
            let w = tape.var(head.get("probe.weight")?.clone());
            let b = tape.var(head.get("probe.bias")?.clone());
            let xv = tape.constant(Tensor::raw(vec![chunk.len(), d], xb));
            let loss = xv.matmul(w)?.add_bias(b)?.cross_entropy(&yb)?;
            let g = tape.backward(loss)?;
            let grads = [("probe.weight".to_string(), g.get_or_zeros(w)), ("probe.bias".to_string(), g.get_or_zeros(b))]
                .into_iter()
                .collect();
            adamw_step(&mut head, &grads, &mut opt, &cfg.optimizer, cfg.optimizer.lr_at_step(step, steps_per_epoch))?;
            step += 1;
        }
    }
    Ok(LinearProbeHead { weight: head.get("probe.weight")?.clone(), bias: head.get("probe.bias")?.clone() })
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub head: LinearProbeHead,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Trains a probe on frozen features of `train` and scores it on `test`.
/// Fails with a state error if the backbone changed underneath.
pub fn train_linear_probe<F: Float>(
    enc: &OmniEncoder<F>,
    train: &[crate::encoder::ModalitySample],
    test: &[crate::encoder::ModalitySample],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeOutcome> {
    let before = enc.backbone_digest();
    let labels = |s: &[crate::encoder::ModalitySample]| -> Result<Vec<u32>> {
        s.iter().map(|x| x.label.ok_or_else(|| Error::Data("probe sample without a label".into()))).collect()
    };
    let (ytr, yte) = (labels(train)?, labels(test)?);
    let classes = class_count(&ytr)?;
    let xtr = enc.features(train, 128)?.cast::<f32>();
    let xte = enc.features(test, 128)?.cast::<f32>();
    let head = fit_probe(&xtr, &ytr, classes, cfg, seed)?;
    if enc.backbone_digest() != before {
        return Err(Error::State("backbone changed during probing".into()));
    }
    Ok(ProbeOutcome { train_accuracy: head.accuracy(&xtr, &ytr)?, test_accuracy: head.accuracy(&xte, &yte)?, head })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_one_hot_features_are_learned() {
        let k = 4;
        let labels: Vec<u32> = (0..40).map(|i| (i % k) as u32).collect();
        let mut x = vec![0.0f32; 40 * 8];
        for (i, &y) in labels.iter().enumerate() {
            x[i * 8 + y as usize] = 1.0;
        }
        let x = Tensor::from_vec(&[40, 8], x).unwrap();
        let head = fit_probe(&x, &labels, k, &ProbeConfig::default(), 0).unwrap();
        assert_eq!(head.accuracy(&x, &labels).unwrap(), 1.0);
    }

    #[test]
    fn single_class_is_degenerate() {
        assert!(matches!(class_count(&[2, 2, 2]), Err(Error::Data(_))));
        assert_eq!(class_count(&[0, 3, 1]).unwrap(), 4);
    }
}
