//! The unimodal contrastive pretraining loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::checkpoint::Checkpoint;
use crate::encoder::{Bound, EncoderConfig, Modality, OmniEncoder};
use crate::error::{Error, Result};
use crate::pretrain::augment::{augment, AugmentationConfig};
use crate::pretrain::loss::{nt_xent_loss, stacked_pairing, ContrastiveConfig};
use crate::pretrain::optim::{adamw_step, OptimizerConfig, OptimizerState};
use crate::pretrain::schedule::{ModalityScheduler, ScheduleMode, Stores};
use crate::tensor::Float;

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub contrastive: ContrastiveConfig,
    pub augment: AugmentationConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleMode,
}

impl PretrainConfig {
    /// Settings used for desk-scale runs.
    pub fn desk(cfg: &EncoderConfig, epochs: usize) -> Self {
        PretrainConfig {
            contrastive: ContrastiveConfig { temperature: 0.05, batch_size: 32 },
            augment: AugmentationConfig::desk(cfg),
            optimizer: OptimizerConfig::new(1e-3, 1e-5, 0.1, 5.min(epochs), epochs),
            schedule: ScheduleMode::Cyclic,
        }
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        self.contrastive.validate()?;
        self.augment.validate(cfg)?;
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub modality: Modality,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub log: Vec<LossRecord>,
    /// Set when a non-finite loss or gradient stopped training early; the
    /// encoder then holds the last good state.
    pub aborted: Option<String>,
}

impl PretrainOutcome {
    /// Mean loss per epoch for one modality.
    pub fn epoch_means(&self, m: Modality) -> Vec<f64> {
        let mut sums: Vec<(f64, usize)> = Vec::new();
        for r in self.log.iter().filter(|r| r.modality == m) {
            if sums.len() <= r.epoch {
                sums.resize(r.epoch + 1, (0.0, 0));
            }
            sums[r.epoch].0 += r.loss;
            sums[r.epoch].1 += 1;
        }
        sums.into_iter().filter(|s| s.1 > 0).map(|(s, n)| s / n as f64).collect()
    }

    pub fn log_lines(&self) -> String {
        let mut out = String::from("epoch,step,modality,loss,lr\n");
        for r in &self.log {
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.step, r.modality, r.loss, r.lr);
        }
        out
    }

    pub fn write_log(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.log_lines())?;
        Ok(())
    }
}

/// Contrastive loss of one modality batch under the current parameters.
pub fn contrastive_step_loss<'t, F: Float>(
    enc: &OmniEncoder<F>,
    b: &Bound<'t, '_, F>,
    view1: &[crate::encoder::ModalitySample],
    view2: &[crate::encoder::ModalitySample],
    m: Modality,
    temperature: f64,
) -> Result<Var<'t, F>> {
    let z1 = enc.project(b, enc.encode(b, view1)?, m)?;
    let z2 = enc.project(b, enc.encode(b, view2)?, m)?;
    let z = Var::concat(&[z1, z2], 0)?;
    nt_xent_loss(z, &stacked_pairing(view1.len()), temperature)
}

/// Trains `enc` in place. Every parameter marked trainable is updated.
pub fn run_pretraining<F: Float>(
    enc: &mut OmniEncoder<F>,
    stores: &Stores,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    cfg.validate(&enc.cfg)?;
    let epochs = cfg.optimizer.epochs;
    let mut sched = ModalityScheduler::new(cfg.schedule, cfg.contrastive.batch_size);
    let steps_per_epoch = sched.steps_per_epoch(stores);
    let mut outcome = PretrainOutcome { log: Vec::new(), aborted: None };
    if epochs == 0 {
        return Ok(outcome);
    }
    if steps_per_epoch == 0 {
        return Err(Error::Data("no full batch fits in the stores".into()));
    }
    let mut batch_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(seed);
    aug_rng.set_stream(1);
    let mut opt = OptimizerState::new();
    let mut step = 0;
    for epoch in 0..epochs {
        for _ in 0..steps_per_epoch {
            let batch = sched.sample_modality_minibatch(stores, &mut batch_rng)?;
            let m = batch.modality();
            let v1: Vec<_> = batch.samples().iter().map(|s| augment(s, &cfg.augment, &enc.cfg, &mut aug_rng)).collect();
            let v2: Vec<_> = batch.samples().iter().map(|s| augment(s, &cfg.augment, &enc.cfg, &mut aug_rng)).collect();
            let lr = cfg.optimizer.lr_at_step(step, steps_per_epoch);
            let grads = {
                let tape = Tape::new();
                let b = Bound::new(&tape, &enc.params);
                let loss = contrastive_step_loss(enc, &b, &v1, &v2, m, cfg.contrastive.temperature)?;
                let value = loss.item().to_f64();
                if !value.is_finite() {
                    outcome.aborted = Some(format!("non-finite loss at step {step} ({m})"));
                    return Ok(outcome);
                }
                outcome.log.push(LossRecord { epoch, step, modality: m, loss: value, lr });
                let g = tape.backward(loss)?;
                b.collect_grads(&g)
            };
            if let Err(e) = adamw_step(&mut enc.params, &grads, &mut opt, &cfg.optimizer, lr) {
                outcome.aborted = Some(e.to_string());
                return Ok(outcome);
            }
            step += 1;
        }
    }
    Ok(outcome)
}

/// Pretrains and returns the final checkpoint with the loss log.
pub fn pretrain_to_checkpoint<F: Float>(
    enc: &mut OmniEncoder<F>,
    stores: &Stores,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(Checkpoint, PretrainOutcome)> {
    let outcome = run_pretraining(enc, stores, cfg, seed)?;
    let ck = enc.to_checkpoint(&[("seed", seed.to_string())]);
    Ok((ck, outcome))
}
