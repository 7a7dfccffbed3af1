//! The unified encoder: per-modality embedders feeding one shared
//! pre-norm Transformer, read out at the CLS position, followed by
//! per-modality projection heads.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::encoder::config::{EncoderConfig, HeadMode, Modality};
use crate::encoder::params::{Bound, ParamSet};
use crate::encoder::posenc::{positional_encoding, PosKind};
use crate::encoder::sample::{batch_modality, ModalitySample, Payload};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Names of the six adaptable linear maps inside every block.
pub const BLOCK_LINEARS: [&str; 6] = ["attn.q", "attn.k", "attn.v", "attn.out", "mlp.up", "mlp.down"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Centered uniform with half-width `1/sqrt(fan_in)`.
    Uniform { fan_in: usize },
    Normal { std: f64 },
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Standard-basis low-rank adapter on one linear map. The fixed factor is
/// implied by `indices`; the trainable factor lives in the parameter store
/// as `sbora.<layer>.B` with shape `[d_out, r]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub indices: Vec<usize>,
    pub alpha: f64,
}

impl Adapter {
    pub fn rank(&self) -> usize {
        self.indices.len()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }
}

pub fn adapter_param_name(layer: &str) -> String {
    format!("sbora.{layer}.B")
}

/// Parameters shared by every modality.
pub fn is_backbone(name: &str) -> bool {
    name.starts_with("blocks.") || name == "cls_token" || name.starts_with("final_norm.")
}

pub fn is_embedder(name: &str) -> bool {
    name.starts_with("embed.")
}

pub fn is_head(name: &str) -> bool {
    name.starts_with("heads.")
}

pub fn head_prefix(mode: HeadMode, m: Modality) -> String {
    match mode {
        HeadMode::Separate => format!("heads.{}", m.name()),
        HeadMode::Shared => "heads.shared".to_string(),
    }
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, d_in: usize, d_out: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![d_out, d_in],
        init: Init::Uniform { fan_in: d_in },
    });
    out.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![d_out], init: Init::Uniform { fan_in: d_in } });
}

fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(ParamSpec { name: format!("{prefix}.gain"), shape: vec![d], init: Init::Ones });
    out.push(ParamSpec { name: format!("{prefix}.bias"), shape: vec![d], init: Init::Zeros });
}

/// Every parameter of a model with `cfg`, in store order.
pub fn param_specs(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let hid = cfg.mlp_hidden();
    let mut s = Vec::new();
    linear_specs(&mut s, "embed.image", 3 * cfg.image_patch.0 * cfg.image_patch.1, d);
    linear_specs(&mut s, "embed.audio", cfg.audio_patch.0 * cfg.audio_patch.1, d);
    s.push(ParamSpec { name: "embed.text.weight".into(), shape: vec![cfg.vocab_size, d], init: Init::Uniform { fan_in: 1 } });
    s.push(ParamSpec { name: "cls_token".into(), shape: vec![d], init: Init::Normal { std: 0.02 } });
    for i in 0..cfg.n_layers {
        let p = format!("blocks.{i}");
        norm_specs(&mut s, &format!("{p}.norm1"), d);
        for name in ["attn.q", "attn.k", "attn.v", "attn.out"] {
            linear_specs(&mut s, &format!("{p}.{name}"), d, d);
        }
        norm_specs(&mut s, &format!("{p}.norm2"), d);
        linear_specs(&mut s, &format!("{p}.mlp.up"), d, hid);
        linear_specs(&mut s, &format!("{p}.mlp.down"), hid, d);
    }
    norm_specs(&mut s, "final_norm", d);
    let heads: Vec<String> = match cfg.head_mode {
        HeadMode::Separate => Modality::ALL.iter().map(|&m| head_prefix(HeadMode::Separate, m)).collect(),
        HeadMode::Shared => vec![head_prefix(HeadMode::Shared, Modality::Image)],
    };
    for h in heads {
        linear_specs(&mut s, &format!("{h}.fc1"), d, d);
        linear_specs(&mut s, &format!("{h}.fc2"), d, cfg.proj_dim);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct OmniEncoder<F: Float> {
    pub cfg: EncoderConfig,
    pub params: ParamSet<F>,
    /// SBoRA adapters keyed by linear-layer prefix (e.g. `blocks.0.attn.q`).
    pub adapters: IndexMap<String, Adapter>,
    pos: [Tensor<F>; 3],
}

/// Result of a forward pass through the backbone.
pub struct Encoded<'t, F: Float> {
    /// `[B, d]` CLS outputs after the final norm.
    pub cls: Var<'t, F>,
    /// Per block, `[B, heads, T+1, T+1]` post-softmax attention, when traced.
    pub attention: Vec<Tensor<F>>,
}

fn init_value<F: Float>(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let n = spec.numel();
    let data: Vec<F> = match spec.init {
        Init::Uniform { fan_in } => {
            let a = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| F::from_f64(rng.random_range(-a..a))).collect()
        }
        Init::Normal { std } => {
            let dist = Normal::new(0.0, std).expect("valid std");
            (0..n).map(|_| F::from_f64(dist.sample(rng))).collect()
        }
        Init::Ones => vec![F::ONE; n],
        Init::Zeros => vec![F::ZERO; n],
    };
    Tensor::raw(spec.shape.clone(), data)
}

impl<F: Float> OmniEncoder<F> {
    /// Freshly initialized model; deterministic in `seed`.
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for spec in param_specs(&cfg) {
            params.insert(spec.name.clone(), init_value(&spec, &mut rng));
        }
        Self::from_parts(cfg, params, IndexMap::new())
    }

    /// Assembles a model from an existing store, checking every expected
    /// parameter is present with the right shape.
    pub fn from_parts(cfg: EncoderConfig, params: ParamSet<F>, adapters: IndexMap<String, Adapter>) -> Result<Self> {
        cfg.validate()?;
        for spec in param_specs(&cfg) {
            let t = params.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        for (layer, a) in &adapters {
            let w = params.get(&format!("{layer}.weight"))?;
            let b = params.get(&adapter_param_name(layer))?;
            if b.shape() != [w.shape()[0], a.rank()] || a.indices.iter().any(|&j| j >= w.shape()[1]) {
                return Err(Error::Shape(format!("adapter on `{layer}` does not fit its weight {:?}", w.shape())));
            }
        }
        let d = cfg.embed_dim;
        let (ir, ic) = cfg.image_grid();
        let (ar, ac) = cfg.audio_grid();
        let pos = [
            positional_encoding(PosKind::TwoD, &[ir, ic], d)?,
            positional_encoding(PosKind::TwoD, &[ar, ac], d)?,
            positional_encoding(PosKind::OneD, &[cfg.text_len], d)?,
        ];
        Ok(OmniEncoder { cfg, params, adapters, pos })
    }

    /// Hash of the embedders and shared backbone (everything except heads
    /// and adapters).
    pub fn backbone_digest(&self) -> String {
        self.params.digest_where(|n| is_backbone(n) || is_embedder(n))
    }

    pub fn head_prefix(&self, m: Modality) -> String {
        head_prefix(self.cfg.head_mode, m)
    }

    /// Marks everything frozen except parameters matching `pred`.
    pub fn train_only(&mut self, pred: impl Fn(&str) -> bool) {
        self.params.set_trainable_where(false, |_| true);
        self.params.set_trainable_where(true, pred);
    }

    /// `y = x Wᵀ + b`, plus `(alpha/r) · x[:, idx] · Bᵀ` when adapted.
    pub fn linear<'t>(&self, b: &Bound<'t, '_, F>, prefix: &str, x: Var<'t, F>) -> Result<Var<'t, F>> {
        let w = b.get(&format!("{prefix}.weight"))?;
        let bias = b.get(&format!("{prefix}.bias"))?;
        let y = x.matmul_t(w)?.add_bias(bias)?;
        match self.adapters.get(prefix) {
            None => Ok(y),
            Some(a) => {
                let bm = b.get(&adapter_param_name(prefix))?;
                let delta = x.gather_cols(&a.indices)?.matmul_t(bm)?.scale(F::from_f64(a.scale()));
                y.add(delta)
            }
        }
    }

    /// Token embeddings `[B, T, d]` with positional terms added.
    fn embed_tokens<'t>(&self, b: &Bound<'t, '_, F>, samples: &[ModalitySample], m: Modality) -> Result<Var<'t, F>> {
        let tape = b.tape();
        let bsz = samples.len();
        let d = self.cfg.embed_dim;
        for s in samples {
            s.validate(&self.cfg)?;
        }
        let t = self.cfg.tokens(m);
        let tokens = match m {
            Modality::Image | Modality::Audio => {
                let patches = tape.constant(self.patch_matrix(samples, m)?);
                let prefix = if m == Modality::Image { "embed.image" } else { "embed.audio" };
                self.linear(b, prefix, patches)?
            }
            Modality::Text => {
                let ids: Vec<usize> = samples
                    .iter()
                    .flat_map(|s| match &s.payload {
                        Payload::Text(ids) => ids.iter().map(|&i| i as usize).collect::<Vec<_>>(),
                        _ => unreachable!("modality checked"),
                    })
                    .collect();
                b.get("embed.text.weight")?.embedding(&ids)?
            }
        };
        let pos = tape.constant(self.pos[m.index()].clone());
        tokens.reshape(&[bsz, t, d])?.add_bias(pos)
    }

    /// `[B * patches, C * ph * pw]` non-overlapping patches in row-major
    /// grid order; each patch is flattened channel, row, column.
    pub fn patch_matrix(&self, samples: &[ModalitySample], m: Modality) -> Result<Tensor<F>> {
        let (size, patch, channels) = match m {
            Modality::Image => (self.cfg.image_size, self.cfg.image_patch, 3),
            Modality::Audio => (self.cfg.audio_size, self.cfg.audio_patch, 1),
            Modality::Text => return Err(Error::Contract("text has no patches".into())),
        };
        let (h, w) = size;
        let (ph, pw) = patch;
        if h % ph != 0 || w % pw != 0 {
            return Err(Error::Config(format!("{m} size {h}x{w} not divisible by patch {ph}x{pw}")));
        }
        let (gr, gc) = (h / ph, w / pw);
        let width = channels * ph * pw;
        let mut out = Vec::with_capacity(samples.len() * gr * gc * width);
        for s in samples {
            let px = match (&s.payload, m) {
                (Payload::Image(px), Modality::Image) | (Payload::Audio(px), Modality::Audio) => px,
                _ => return Err(Error::Contract(format!("expected {m} payload"))),
            };
            if px.len() != channels * h * w {
                return Err(Error::Shape(format!("{m} payload has {} values, expected {}", px.len(), channels * h * w)));
            }
            for r in 0..gr {
                for c in 0..gc {
                    for ch in 0..channels {
                        for dy in 0..ph {
                            let row = ch * h * w + (r * ph + dy) * w + c * pw;
                            out.extend(px[row..row + pw].iter().map(|&v| F::from_f64(v as f64)));
                        }
                    }
                }
            }
        }
        Ok(Tensor::raw(vec![samples.len() * gr * gc, width], out))
    }

    /// CLS representations `[B, d]` for a single-modality batch.
    pub fn encode<'t>(&self, b: &Bound<'t, '_, F>, samples: &[ModalitySample]) -> Result<Var<'t, F>> {
        Ok(self.encode_traced(b, samples, false)?.cls)
    }

    pub fn encode_traced<'t>(
        &self,
        b: &Bound<'t, '_, F>,
        samples: &[ModalitySample],
        trace: bool,
    ) -> Result<Encoded<'t, F>> {
        let m = batch_modality(samples)?;
        let bsz = samples.len();
        let d = self.cfg.embed_dim;
        let heads = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let tokens = self.embed_tokens(b, samples, m)?;
        let cls = b.get("cls_token")?.reshape(&[1, d])?.expand(bsz)?;
        let mut x = Var::concat(&[cls, tokens], 1)?;
        let t = self.cfg.tokens(m) + 1;
        let inv_sqrt = F::from_f64(1.0 / (dh as f64).sqrt());
        let eps = self.cfg.ln_eps;
        let mut attention = Vec::new();
        let split_heads = |v: Var<'t, F>| -> Result<Var<'t, F>> {
            v.reshape(&[bsz, t, heads, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[bsz * heads, t, dh])
        };
        for i in 0..self.cfg.n_layers {
            let p = format!("blocks.{i}");
            let xn = x
                .layer_norm(b.get(&format!("{p}.norm1.gain"))?, b.get(&format!("{p}.norm1.bias"))?, eps)?
                .reshape(&[bsz * t, d])?;
            let q = split_heads(self.linear(b, &format!("{p}.attn.q"), xn)?)?;
            let k = split_heads(self.linear(b, &format!("{p}.attn.k"), xn)?)?;
            let v = split_heads(self.linear(b, &format!("{p}.attn.v"), xn)?)?;
            let att = q.matmul_t(k)?.scale(inv_sqrt).softmax()?;
            if trace {
                attention.push(att.value().reshaped(&[bsz, heads, t, t])?);
            }
            let ctx = att
                .matmul(v)?
                .reshape(&[bsz, heads, t, dh])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[bsz * t, d])?;
            let out = self.linear(b, &format!("{p}.attn.out"), ctx)?.reshape(&[bsz, t, d])?;
            x = x.add(out)?;
            let xn2 = x
                .layer_norm(b.get(&format!("{p}.norm2.gain"))?, b.get(&format!("{p}.norm2.bias"))?, eps)?
                .reshape(&[bsz * t, d])?;
            let h = self.linear(b, &format!("{p}.mlp.up"), xn2)?.gelu();
            let h = self.linear(b, &format!("{p}.mlp.down"), h)?.reshape(&[bsz, t, d])?;
            x = x.add(h)?;
        }
        let x = x.layer_norm(b.get("final_norm.gain")?, b.get("final_norm.bias")?, eps)?;
        let cls = x.slice(1, 0, 1)?.reshape(&[bsz, d])?;
        Ok(Encoded { cls, attention })
    }

    /// `z = W2 · relu(W1 · cls + b1) + b2` through the head serving `m`.
    pub fn project<'t>(&self, b: &Bound<'t, '_, F>, cls: Var<'t, F>, m: Modality) -> Result<Var<'t, F>> {
        let prefix = self.head_prefix(m);
        let h = self.linear(b, &format!("{prefix}.fc1"), cls)?.relu();
        self.linear(b, &format!("{prefix}.fc2"), h)
    }

    /// Frozen CLS features `[n, d]`, computed in chunks of `batch`.
    pub fn features(&self, samples: &[ModalitySample], batch: usize) -> Result<Tensor<F>> {
        if samples.is_empty() {
            return Err(Error::Contract("no samples to encode".into()));
        }
        let mut out = Vec::with_capacity(samples.len() * self.cfg.embed_dim);
        for chunk in samples.chunks(batch.max(1)) {
            let tape = Tape::new();
            let b = Bound::frozen(&tape, &self.params);
            out.extend_from_slice(self.encode(&b, chunk)?.value().data());
        }
        Ok(Tensor::raw(vec![samples.len(), self.cfg.embed_dim], out))
    }

    /// Frozen projected embeddings `[n, p]`.
    pub fn projections(&self, samples: &[ModalitySample], batch: usize) -> Result<Tensor<F>> {
        let m = batch_modality(samples)?;
        let mut out = Vec::with_capacity(samples.len() * self.cfg.proj_dim);
        for chunk in samples.chunks(batch.max(1)) {
            let tape = Tape::new();
            let b = Bound::frozen(&tape, &self.params);
            let cls = self.encode(&b, chunk)?;
            out.extend_from_slice(self.project(&b, cls, m)?.value().data());
        }
        Ok(Tensor::raw(vec![samples.len(), self.cfg.proj_dim], out))
    }

    /// Converts every tensor to another element type.
    pub fn cast<G: Float>(&self) -> OmniEncoder<G> {
        let mut params = ParamSet::new();
        for (k, p) in self.params.iter() {
            params.insert(k, p.value.cast());
            params.set_trainable(k, p.trainable).expect("just inserted");
        }
        OmniEncoder::from_parts(self.cfg.clone(), params, self.adapters.clone()).expect("same layout")
    }
}
