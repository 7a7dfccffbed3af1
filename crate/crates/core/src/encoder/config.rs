use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Image,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Audio, Modality::Text];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "audio" => Ok(Modality::Audio),
            "text" => Ok(Modality::Text),
            other => Err(Error::Contract(format!("unknown modality tag `{other}`"))),
        }
    }
}

/// Projection-head layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// One head per modality.
    Separate,
    /// A single head used for every modality.
    Shared,
}

impl HeadMode {
    pub fn name(self) -> &'static str {
        match self {
            HeadMode::Separate => "separate",
            HeadMode::Shared => "shared",
        }
    }
}

impl FromStr for HeadMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separate" => Ok(HeadMode::Separate),
            "shared" => Ok(HeadMode::Shared),
            other => Err(Error::Config(format!("unknown head mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    pub image_patch: (usize, usize),
    /// (time frames, frequency bins).
    pub audio_size: (usize, usize),
    pub audio_patch: (usize, usize),
    pub text_len: usize,
    pub vocab_size: usize,
    pub proj_dim: usize,
    pub head_mode: HeadMode,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Small configuration that trains on a laptop CPU in about a minute.
    pub fn desk() -> Self {
        EncoderConfig {
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_ratio: 4.0,
            image_size: (32, 32),
            image_patch: (8, 8),
            audio_size: (32, 16),
            audio_patch: (8, 8),
            text_len: 16,
            vocab_size: crate::data::tokenizer::VOCAB_SIZE,
            proj_dim: 64,
            head_mode: HeadMode::Separate,
            ln_eps: 1e-5,
        }
    }

    /// ViT-Base dimensions: d=768, 12 layers, 12 heads, 224px images and
    /// 256x128 spectrograms with 32x32 patches.
    pub fn vit_base() -> Self {
        EncoderConfig {
            embed_dim: 768,
            n_layers: 12,
            n_heads: 12,
            mlp_ratio: 4.0,
            image_size: (224, 224),
            image_patch: (32, 32),
            audio_size: (256, 128),
            audio_patch: (32, 32),
            text_len: 128,
            vocab_size: crate::data::tokenizer::VOCAB_SIZE,
            proj_dim: 256,
            head_mode: HeadMode::Separate,
            ln_eps: 1e-6,
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn image_grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.image_patch.0, self.image_size.1 / self.image_patch.1)
    }

    pub fn audio_grid(&self) -> (usize, usize) {
        (self.audio_size.0 / self.audio_patch.0, self.audio_size.1 / self.audio_patch.1)
    }

    /// Token count before the CLS token is prepended.
    pub fn tokens(&self, m: Modality) -> usize {
        match m {
            Modality::Image => {
                let (r, c) = self.image_grid();
                r * c
            }
            Modality::Audio => {
                let (r, c) = self.audio_grid();
                r * c
            }
            Modality::Text => self.text_len,
        }
    }

    /// Flat `key -> value` rendering, the inverse of [`Self::from_pairs`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let pair = |a: (usize, usize)| format!("{}x{}", a.0, a.1);
        vec![
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("mlp_ratio".into(), format!("{:?}", self.mlp_ratio)),
            ("image_size".into(), pair(self.image_size)),
            ("image_patch".into(), pair(self.image_patch)),
            ("audio_size".into(), pair(self.audio_size)),
            ("audio_patch".into(), pair(self.audio_patch)),
            ("text_len".into(), self.text_len.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("proj_dim".into(), self.proj_dim.to_string()),
            ("head_mode".into(), self.head_mode.name().into()),
            ("ln_eps".into(), format!("{:?}", self.ln_eps)),
        ]
    }

    /// Starts from the desk defaults and applies every pair; unknown keys
    /// are rejected.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = Self::desk();
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value `{value}` for `{key}`"));
        let int = || value.trim().parse::<usize>().map_err(|_| bad());
        let float = || value.trim().parse::<f64>().map_err(|_| bad());
        let pair = || -> Result<(usize, usize)> {
            let t = value.trim();
            match t.split_once('x') {
                Some((a, b)) => Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?)),
                None => {
                    let n = t.parse().map_err(|_| bad())?;
                    Ok((n, n))
                }
            }
        };
        match key {
            "embed_dim" => self.embed_dim = int()?,
            "n_layers" => self.n_layers = int()?,
            "n_heads" => self.n_heads = int()?,
            "mlp_ratio" => self.mlp_ratio = float()?,
            "image_size" => self.image_size = pair()?,
            "image_patch" => self.image_patch = pair()?,
            "audio_size" => self.audio_size = pair()?,
            "audio_patch" => self.audio_patch = pair()?,
            "text_len" => self.text_len = int()?,
            "vocab_size" => self.vocab_size = int()?,
            "proj_dim" => self.proj_dim = int()?,
            "head_mode" => self.head_mode = value.trim().parse()?,
            "ln_eps" => self.ln_eps = float()?,
            _ => return Err(Error::Config(format!("unknown encoder key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        pos("embed_dim", self.embed_dim)?;
        pos("n_layers", self.n_layers)?;
        pos("n_heads", self.n_heads)?;
        pos("text_len", self.text_len)?;
        pos("vocab_size", self.vocab_size)?;
        pos("proj_dim", self.proj_dim)?;
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::Config(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.embed_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a multiple of 4 for 2d positional encoding",
                self.embed_dim
            )));
        }
        for (what, size, patch) in [
            ("image", self.image_size, self.image_patch),
            ("audio", self.audio_size, self.audio_patch),
        ] {
            if patch.0 == 0 || patch.1 == 0 || size.0 == 0 || size.1 == 0 {
                return Err(Error::Config(format!("{what} size and patch must be positive")));
            }
            if size.0 % patch.0 != 0 || size.1 % patch.1 != 0 {
                return Err(Error::Config(format!(
                    "{what} size {}x{} is not divisible by patch {}x{}",
                    size.0, size.1, patch.0, patch.1
                )));
            }
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}
