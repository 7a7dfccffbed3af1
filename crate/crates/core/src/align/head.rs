//! Linear alignment head trained with symmetric InfoNCE.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::cache::PairedFeatureCache;
use crate::autodiff::{Tape, Var};
use crate::data::checkpoint::{Checkpoint, Entry};
use crate::data::tokenizer::tokenize_text;
use crate::encoder::{Bound, Modality, ModalitySample, OmniEncoder, ParamSet};
use crate::error::{Error, Result};
use crate::pretrain::optim::{adamw_step, OptimizerConfig, OptimizerState};
use crate::tensor::{matmul_plain, Float, Tensor};

pub const INIT_LOGIT_SCALE: f64 = 1.0 / 0.07;
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// Per-modality projections `d → q` and a learnable log logit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentHead {
    pub modality_a: Modality,
    pub modality_b: Modality,
    pub params: ParamSet<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

impl AlignmentHead {
    pub fn new(modality_a: Modality, modality_b: Modality, d: usize, q: usize, seed: u64) -> Result<Self> {
        if d == 0 || q == 0 {
            return Err(Error::Config("alignment dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d as f64).sqrt();
        let mut init = || Tensor::raw(vec![q, d], (0..q * d).map(|_| rng.random_range(-bound..bound) as f32).collect());
        let mut params = ParamSet::new();
        params.insert("proj_a.weight", init());
        params.insert("proj_b.weight", init());
        params.insert("logit_scale", Tensor::scalar(INIT_LOGIT_SCALE.ln() as f32));
        Ok(AlignmentHead { modality_a, modality_b, params })
    }

    pub fn logit_scale(&self) -> f64 {
        (self.params.get("logit_scale").expect("present").item() as f64).exp().min(MAX_LOGIT_SCALE)
    }

    fn weight(&self, side: Side) -> &Tensor<f32> {
        self.params.get(if side == Side::A { "proj_a.weight" } else { "proj_b.weight" }).expect("present")
    }

    pub fn side_of(&self, m: Modality) -> Result<Side> {
        match m {
            m if m == self.modality_a => Ok(Side::A),
            m if m == self.modality_b => Ok(Side::B),
            m => Err(Error::Contract(format!("head aligns {} and {}, not {m}", self.modality_a, self.modality_b))),
        }
    }

    /// Unit-norm projected rows `[n, q]`.
    pub fn embed(&self, side: Side, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let w = self.weight(side);
        if x.last_dim() != w.shape()[1] {
            return Err(Error::Shape(format!("features of width {}, head expects {}", x.last_dim(), w.shape()[1])));
        }
        let wt = Tensor::raw(vec![w.shape()[1], w.shape()[0]], transpose(w));
        let mut z = matmul_plain(x, &wt)?;
        let q = z.last_dim();
        for row in z.data_mut().chunks_exact_mut(q) {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(z)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        ck.meta.insert("modality_a".into(), self.modality_a.to_string());
        ck.meta.insert("modality_b".into(), self.modality_b.to_string());
        for (k, p) in self.params.iter() {
            ck.entries.insert(k.to_string(), Entry::from_tensor(&p.value));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| ck.meta.get(k).ok_or_else(|| Error::Data(format!("alignment checkpoint lacks `{k}`")));
        let mut params = ParamSet::new();
        for name in ["proj_a.weight", "proj_b.weight", "logit_scale"] {
            let e = ck.entries.get(name).ok_or_else(|| Error::Data(format!("alignment checkpoint lacks `{name}`")))?;
            params.insert(name, e.to_tensor()?);
        }
        Ok(AlignmentHead { modality_a: meta("modality_a")?.parse()?, modality_b: meta("modality_b")?.parse()?, params })
    }
}

fn unit_rows(x: &Tensor<f32>) -> Tensor<f32> {
    let mut out = x.clone();
    let d = x.last_dim();
    for row in out.data_mut().chunks_exact_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

fn transpose(w: &Tensor<f32>) -> Vec<f32> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = w.data()[i * c + j];
        }
    }
    out
}

/// `½ (CE(rows) + CE(columns))` of `scale · cos(a_i, b_j)` with diagonal
/// targets.
pub fn symmetric_info_nce<'t, F: Float>(za: Var<'t, F>, zb: Var<'t, F>, log_scale: Var<'t, F>) -> Result<Var<'t, F>> {
    let m = za.shape()[0];
    if m < 2 {
        return Err(Error::Contract(format!("symmetric InfoNCE needs at least 2 pairs, got {m}")));
    }
    if zb.shape() != za.shape() {
        return Err(Error::Shape(format!("paired embeddings {:?} and {:?}", za.shape(), zb.shape())));
    }
    let sim = za.l2_normalize().matmul_t(zb.l2_normalize())?;
    let scale = log_scale.exp().expand(m * m)?.reshape(&[m, m])?;
    let logits = sim.mul(scale)?;
    let diag: Vec<usize> = (0..m).collect();
    let rows = logits.cross_entropy(&diag)?;
    let cols = logits.transpose()?.cross_entropy(&diag)?;
    Ok(rows.add(cols)?.scale(F::from_f64(0.5)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
}

impl AlignConfig {
    /// lr 1e-3 decaying to 1e-4, wd 0.1, 10 warmup epochs.
    pub fn desk(epochs: usize) -> Self {
        AlignConfig { optimizer: OptimizerConfig::new(1e-3, 1e-4, 0.1, 10.min(epochs), epochs), batch_size: 128 }
    }
}

/// Trains only the head; returns the per-step loss.
pub fn train_alignment(cache: &PairedFeatureCache, head: &mut AlignmentHead, cfg: &AlignConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.optimizer.validate()?;
    if cache.a.modality != head.modality_a || cache.b.modality != head.modality_b {
        return Err(Error::Contract("cache and head modalities differ".into()));
    }
    let n = cache.len();
    let bs = cfg.batch_size.min(n);
    if bs < 2 {
        return Err(Error::Contract(format!("symmetric InfoNCE needs at least 2 pairs per batch, got {bs}")));
    }
    let (xa, xb) = (cache.side_a(), cache.side_b());
    let d = xa.last_dim();
    let steps_per_epoch = n / bs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = OptimizerState::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::new();
    let max_log = MAX_LOGIT_SCALE.ln() as f32;
    for _ in 0..cfg.optimizer.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(bs) {
            let gather = |x: &Tensor<f32>| {
                Tensor::raw(vec![bs, d], chunk.iter().flat_map(|&i| x.row(i).iter().copied()).collect::<Vec<_>>())
            };
            let tape = Tape::new();
            let b = Bound::new(&tape, &head.params);
            let za = tape.constant(gather(&xa)).matmul_t(b.get("proj_a.weight")?)?;
            let zb = tape.constant(gather(&xb)).matmul_t(b.get("proj_b.weight")?)?;
            let loss = symmetric_info_nce(za, zb, b.get("logit_scale")?)?;
            log.push(loss.item() as f64);
            let grads = b.collect_grads(&tape.backward(loss)?);
            drop(b);
            let lr = cfg.optimizer.lr_at_step(log.len() - 1, steps_per_epoch);
            adamw_step(&mut head.params, &grads, &mut opt, &cfg.optimizer, lr)?;
            let ls = head.params.get_mut("logit_scale")?;
            ls.data_mut()[0] = ls.data()[0].min(max_log);
        }
    }
    Ok(log)
}

/// Argmax cosine similarity against each class embedding; ties go to the
/// lowest class id.
pub fn nearest_class(queries: &Tensor<f32>, classes: &Tensor<f32>) -> Result<Vec<u32>> {
    if classes.shape().len() != 2 || classes.rows() == 0 {
        return Err(Error::Contract("no classes to choose from".into()));
    }
    let (q, c) = (unit_rows(queries), unit_rows(classes));
    let sims = matmul_plain(&q, &Tensor::raw(vec![c.last_dim(), c.rows()], transpose(&c)))?;
    let k = classes.rows();
    Ok(sims
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect())
}

/// Classifies raw backbone features of `head.modality_a` against text
/// prompts encoded by the frozen backbone.
pub fn zero_shot_classify<F: Float>(
    queries: &Tensor<f32>,
    class_prompts: &[String],
    enc: &OmniEncoder<F>,
    head: &AlignmentHead,
) -> Result<Vec<u32>> {
    if class_prompts.is_empty() {
        return Err(Error::Contract("empty class list".into()));
    }
    let text_side = head.side_of(Modality::Text)?;
    let query_side = if text_side == Side::A { Side::B } else { Side::A };
    let prompts = class_prompt_samples(class_prompts, enc.cfg.text_len)?;
    let class_feats = enc.features(&prompts, 128)?.cast::<f32>();
    let class_emb = head.embed(text_side, &class_feats)?;
    nearest_class(&head.embed(query_side, queries)?, &class_emb)
}

pub fn class_prompt_samples(class_prompts: &[String], text_len: usize) -> Result<Vec<ModalitySample>> {
    class_prompts
        .iter()
        .map(|p| {
            if p.len() > text_len {
                return Err(Error::Contract(format!("prompt `{p}` exceeds {text_len} tokens")));
            }
            Ok(ModalitySample::text(tokenize_text(p.as_bytes(), text_len)))
        })
        .collect()
}

/// Fraction of queries whose true partner ranks within the top `k`, as
/// `(A→B, B→A)`.
pub fn retrieval_at_k(cache: &PairedFeatureCache, head: &AlignmentHead, k: usize) -> Result<(f64, f64)> {
    if k < 1 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    let n = cache.len();
    if n < k {
        return Err(Error::Contract(format!("{n} candidates, k = {k}")));
    }
    let ea = head.embed(Side::A, &cache.side_a())?;
    let eb = head.embed(Side::B, &cache.side_b())?;
    let recall = |q: &Tensor<f32>, c: &Tensor<f32>| -> Result<f64> {
        let sims = matmul_plain(q, &Tensor::raw(vec![c.last_dim(), n], transpose(c)))?;
        let hits = sims
            .data()
            .chunks_exact(n)
            .enumerate()
            .filter(|(i, row)| row.iter().filter(|&&s| s > row[*i]).count() < k)
            .count();
        Ok(hits as f64 / n as f64)
    };
    Ok((recall(&ea, &eb)?, recall(&eb, &ea)?))
}

/// Class-level recall: fraction of queries whose `k` most similar
/// candidates (ties to the lower index) include one with the query's
/// label, as `(A→B, B→A)`. Chance is about `k / classes`.
pub fn class_retrieval_at_k(cache: &PairedFeatureCache, head: &AlignmentHead, k: usize) -> Result<(f64, f64)> {
    if k < 1 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    let n = cache.len();
    if n < k {
        return Err(Error::Contract(format!("{n} candidates, k = {k}")));
    }
    let (la, lb) = match (cache.a.labels(), cache.b.labels()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Data("class retrieval needs labels on both sides".into())),
    };
    let ea = head.embed(Side::A, &cache.side_a())?;
    let eb = head.embed(Side::B, &cache.side_b())?;
    let recall = |q: &Tensor<f32>, c: &Tensor<f32>, ql: &[u32], cl: &[u32]| -> Result<f64> {
        let sims = matmul_plain(q, &Tensor::raw(vec![c.last_dim(), n], transpose(c)))?;
        let mut hits = 0;
        for (i, row) in sims.data().chunks_exact(n).enumerate() {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
            if order[..k].iter().any(|&j| cl[j] == ql[i]) {
                hits += 1;
            }
        }
        Ok(hits as f64 / n as f64)
    };
    Ok((recall(&ea, &eb, &la, &lb)?, recall(&eb, &ea, &lb, &la)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info_nce_value(a: &[f64], b: &[f64], m: usize, q: usize, scale: f64) -> f64 {
        let tape = Tape::<f64>::new();
        let za = tape.var(Tensor::from_vec(&[m, q], a.to_vec()).unwrap());
        let zb = tape.var(Tensor::from_vec(&[m, q], b.to_vec()).unwrap());
        let ls = tape.var(Tensor::scalar(scale.ln()));
        symmetric_info_nce(za, zb, ls).unwrap().item()
    }

    #[test]
    fn two_pair_orthogonal_case() {
        let l = info_nce_value(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2, 2, 10.0);
        let want = -(10f64.exp() / (10f64.exp() + 1.0)).ln();
        assert!((l - want).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_give_ln_m() {
        let l = info_nce_value(&[1.0, 2.0].repeat(5), &[0.5, -1.0].repeat(5), 5, 2, 7.0);
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_pair_is_a_contract_error() {
        let tape = Tape::<f64>::new();
        let z = tape.var(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
        let ls = tape.var(Tensor::scalar(0.0));
        assert!(matches!(symmetric_info_nce(z, z, ls), Err(Error::Contract(_))));
    }

    #[test]
    fn nearest_class_breaks_ties_low() {
        let q = Tensor::from_vec(&[2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let c = Tensor::from_vec(&[3, 2], vec![0.0f32, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(nearest_class(&q, &c).unwrap(), vec![1, 0]);
        assert!(nearest_class(&q, &Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn head_checkpoint_round_trip() {
        let h = AlignmentHead::new(Modality::Image, Modality::Text, 8, 4, 2).unwrap();
        let back = AlignmentHead::from_checkpoint(&Checkpoint::from_bytes(&h.to_checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, h);
        assert!((h.logit_scale() - INIT_LOGIT_SCALE).abs() < 1e-4);
    }
}
