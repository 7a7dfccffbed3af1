//! Standard-basis low-rank adapters with a frozen basis factor.

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapt::probe::{accuracy, class_count, LinearProbeHead, ProbeConfig};
use crate::autodiff::Tape;
use crate::encoder::model::{adapter_param_name, is_backbone, param_specs, BLOCK_LINEARS};
use crate::encoder::{Adapter, Bound, EncoderConfig, ModalitySample, OmniEncoder, ParamSet};
use crate::error::{Error, Result};
use crate::pretrain::optim::{adamw_step, OptimizerState};
use crate::tensor::{Float, Tensor};

/// Fully qualified layer names (`blocks.<i>.<target>`) for every block.
pub fn target_layers(cfg: &EncoderConfig, targets: &[&str]) -> Result<Vec<String>> {
    if let Some(bad) = targets.iter().find(|t| !BLOCK_LINEARS.contains(t)) {
        return Err(Error::Config(format!("unknown adapter target `{bad}`")));
    }
    Ok((0..cfg.n_layers).flat_map(|i| targets.iter().map(move |t| format!("blocks.{i}.{t}"))).collect())
}

fn weight_shape(cfg: &EncoderConfig, layer: &str) -> Result<Vec<usize>> {
    let name = format!("{layer}.weight");
    param_specs(cfg)
        .into_iter()
        .find(|s| s.name == name)
        .map(|s| s.shape)
        .ok_or_else(|| Error::Config(format!("no weight for layer `{layer}`")))
}

/// Adds a zero-initialized adapter to each target and freezes everything
/// else. Basis indices are drawn without replacement, seeded per layer.
pub fn attach_sbora<F: Float>(enc: &mut OmniEncoder<F>, targets: &[&str], rank: usize, alpha: f64, seed: u64) -> Result<()> {
    if rank == 0 {
        return Err(Error::Config("adapter rank must be positive".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::Config(format!("adapter alpha must be positive, got {alpha}")));
    }
    let layers = target_layers(&enc.cfg, targets)?;
    for layer in &layers {
        let shape = weight_shape(&enc.cfg, layer)?;
        if rank > shape[1] {
            return Err(Error::Config(format!("rank {rank} exceeds input width {} of `{layer}`", shape[1])));
        }
        if enc.adapters.contains_key(layer) {
            return Err(Error::State(format!("`{layer}` already has an adapter")));
        }
    }
    for (k, layer) in layers.iter().enumerate() {
        let shape = weight_shape(&enc.cfg, layer)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let indices = sample(&mut rng, shape[1], rank).into_vec();
        enc.params.insert(adapter_param_name(layer), Tensor::zeros(&[shape[0], rank]));
        enc.adapters.insert(layer.clone(), Adapter { indices, alpha });
    }
    enc.train_only(|n| n.starts_with("sbora."));
    Ok(())
}

/// Trainable parameters among backbone weights and adapters, over the
/// backbone total. Embedders and heads are excluded from both counts.
pub fn count_trainable_fraction<F: Float>(enc: &OmniEncoder<F>) -> f64 {
    let (mut trainable, mut total) = (0usize, 0usize);
    for (name, p) in enc.params.iter() {
        if is_backbone(name) {
            total += p.value.len();
        }
        if p.trainable && (is_backbone(name) || name.starts_with("sbora.")) {
            trainable += p.value.len();
        }
    }
    trainable as f64 / total as f64
}

/// Closed-form `Σ d_out · r / backbone total` without building the model.
pub fn sbora_fraction(cfg: &EncoderConfig, targets: &[&str], rank: usize) -> Result<f64> {
    let mut adapter = 0usize;
    for layer in target_layers(cfg, targets)? {
        adapter += weight_shape(cfg, &layer)?[0] * rank;
    }
    let total: usize = param_specs(cfg).iter().filter(|s| is_backbone(&s.name)).map(|s| s.numel()).sum();
    Ok(adapter as f64 / total as f64)
}

/// `ΔW = (alpha/r) · B · A` as a dense `[d_out, d_in]` matrix.
pub fn delta_weight<F: Float>(enc: &OmniEncoder<F>, layer: &str) -> Result<Tensor<F>> {
    let a = enc.adapters.get(layer).ok_or_else(|| Error::Contract(format!("no adapter on `{layer}`")))?;
    let w = enc.params.get(&format!("{layer}.weight"))?;
    let b = enc.params.get(&adapter_param_name(layer))?;
    let (d_out, d_in, r) = (w.shape()[0], w.shape()[1], a.rank());
    let s = F::from_f64(a.scale());
    let mut out = vec![F::ZERO; d_out * d_in];
    for o in 0..d_out {
        for (j, &col) in a.indices.iter().enumerate() {
            out[o * d_in + col] = out[o * d_in + col] + s * b.data()[o * r + j];
        }
    }
    Tensor::from_vec(&[d_out, d_in], out)
}

/// Folds every adapter into its weight; the result carries no adapters.
/// Trainable flags of the remaining parameters are kept.
pub fn merge_sbora<F: Float>(enc: &OmniEncoder<F>) -> Result<OmniEncoder<F>> {
    let mut params = enc.params.clone();
    for (layer, a) in &enc.adapters {
        let b = enc.params.get(&adapter_param_name(layer))?.clone();
        let s = F::from_f64(a.scale());
        let r = a.rank();
        let w = params.get_mut(&format!("{layer}.weight"))?;
        let d_in = w.shape()[1];
        let data = w.data_mut();
        for o in 0..b.shape()[0] {
            for (j, &col) in a.indices.iter().enumerate() {
                data[o * d_in + col] = data[o * d_in + col] + s * b.data()[o * r + j];
            }
        }
        params.remove(&adapter_param_name(layer));
    }
    OmniEncoder::from_parts(enc.cfg.clone(), params, IndexMap::new())
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub head: LinearProbeHead,
    pub test_accuracy: f64,
}

/// Trains adapters plus a fresh linear head by cross-entropy on CLS
/// features. Only `sbora.*` parameters of `enc` move.
pub fn finetune_sbora<F: Float>(
    enc: &mut OmniEncoder<F>,
    train: &[ModalitySample],
    test: &[ModalitySample],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    cfg.optimizer.validate()?;
    if enc.adapters.is_empty() {
        return Err(Error::State("no adapters attached".into()));
    }
    let labels = |s: &[ModalitySample]| -> Result<Vec<u32>> {
        s.iter().map(|x| x.label.ok_or_else(|| Error::Data("sample without a label".into()))).collect()
    };
    let (ytr, yte) = (labels(train)?, labels(test)?);
    let k = class_count(&ytr)?;
    let d = enc.cfg.embed_dim;
    let mut head = ParamSet::<F>::new();
    head.insert("probe.weight", Tensor::zeros(&[d, k]));
    head.insert("probe.bias", Tensor::zeros(&[k]));
    let (mut opt_enc, mut opt_head) = (OptimizerState::new(), OptimizerState::new());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bs = cfg.batch_size.clamp(1, train.len());
    let steps_per_epoch = train.len().div_ceil(bs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.optimizer.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let batch: Vec<ModalitySample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let yb: Vec<usize> = chunk.iter().map(|&i| ytr[i] as usize).collect();
            let tape = Tape::new();
            let be = Bound::new(&tape, &enc.params);
            let bh = Bound::new(&tape, &head);
            let cls = enc.encode(&be, &batch)?;
            let loss = cls.matmul(bh.get("probe.weight")?)?.add_bias(bh.get("probe.bias")?)?.cross_entropy(&yb)?;
            let g = tape.backward(loss)?;
            let (ge, gh) = (be.collect_grads(&g), bh.collect_grads(&g));
            drop(be);
            let lr = cfg.optimizer.lr_at_step(step, steps_per_epoch);
            adamw_step(&mut enc.params, &ge, &mut opt_enc, &cfg.optimizer, lr)?;
            adamw_step(&mut head, &gh, &mut opt_head, &cfg.optimizer, lr)?;
            step += 1;
        }
    }
    let head = LinearProbeHead { weight: head.get("probe.weight")?.cast(), bias: head.get("probe.bias")?.cast() };
    let xte = enc.features(test, 128)?.cast::<f32>();
    Ok(FinetuneOutcome { test_accuracy: accuracy(&head.predict(&xte)?, &yte), head })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vit_base_fraction_is_about_twelve_percent() {
        let f = sbora_fraction(&EncoderConfig::vit_base(), &BLOCK_LINEARS, 128).unwrap();
        assert!((f - 0.1248).abs() < 1e-3, "{f}");
    }

    #[test]
    fn attach_counts_match_closed_form() {
        let mut enc = OmniEncoder::<f32>::new(EncoderConfig::desk(), 0).unwrap();
        assert_eq!(count_trainable_fraction(&enc), 1.0);
        attach_sbora(&mut enc, &BLOCK_LINEARS, 8, 8.0, 1).unwrap();
        let want = sbora_fraction(&enc.cfg, &BLOCK_LINEARS, 8).unwrap();
        assert!((count_trainable_fraction(&enc) - want).abs() < 1e-15);
        enc.train_only(|_| false);
        assert_eq!(count_trainable_fraction(&enc), 0.0);
    }

    #[test]
    fn rank_above_input_width_is_rejected() {
        let mut enc = OmniEncoder::<f32>::new(EncoderConfig::desk(), 0).unwrap();
        let d = enc.cfg.embed_dim;
        assert!(matches!(attach_sbora(&mut enc, &["attn.q"], d + 1, 1.0, 0), Err(Error::Config(_))));
        assert!(attach_sbora(&mut enc, &["attn.qq"], 2, 1.0, 0).is_err());
    }

    #[test]
    fn rank_one_delta_is_a_single_entry() {
        let mut enc = OmniEncoder::<f64>::new(EncoderConfig::desk(), 0).unwrap();
        attach_sbora(&mut enc, &["attn.q"], 1, 1.0, 0).unwrap();
        enc.adapters.get_mut("blocks.0.attn.q").unwrap().indices = vec![3];
        let b = enc.params.get_mut("sbora.blocks.0.attn.q.B").unwrap();
        b.data_mut()[1] = 1.0;
        let dw = delta_weight(&enc, "blocks.0.attn.q").unwrap();
        let d_in = dw.shape()[1];
        for (i, &v) in dw.data().iter().enumerate() {
            assert_eq!(v, if i == d_in + 3 { 1.0 } else { 0.0 });
        }
    }
}
