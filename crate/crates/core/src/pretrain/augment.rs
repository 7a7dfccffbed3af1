//! Modality-specific view augmentations.

use rand::Rng;

use crate::data::tokenizer::MASK_ID;
use crate::encoder::{EncoderConfig, ModalitySample, Payload};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageAugment {
    /// Area fraction range for random resized crops.
    pub crop_scale: (f64, f64),
    pub flip_p: f64,
    /// Brightness / contrast / saturation strength.
    pub jitter: f64,
    pub blur_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioAugment {
    /// Widest time mask, in frames.
    pub max_time_width: usize,
    /// Widest frequency mask, in bins.
    pub max_freq_width: usize,
    pub masks_per_axis: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextAugment {
    pub mask_p: f64,
    pub mask_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub image: ImageAugment,
    pub audio: AudioAugment,
    pub text: TextAugment,
}

impl AugmentationConfig {
    /// Desk defaults; audio mask widths are a quarter of each axis.
    pub fn desk(cfg: &EncoderConfig) -> Self {
        AugmentationConfig {
            image: ImageAugment { crop_scale: (0.2, 1.0), flip_p: 0.5, jitter: 0.4, blur_p: 0.5 },
            audio: AudioAugment {
                max_time_width: cfg.audio_size.0 / 4,
                max_freq_width: cfg.audio_size.1 / 4,
                masks_per_axis: 2,
            },
            text: TextAugment { mask_p: 0.15, mask_id: MASK_ID },
        }
    }

    /// Every augmentation disabled.
    pub fn identity() -> Self {
        AugmentationConfig {
            image: ImageAugment { crop_scale: (1.0, 1.0), flip_p: 0.0, jitter: 0.0, blur_p: 0.0 },
            audio: AudioAugment { max_time_width: 0, max_freq_width: 0, masks_per_axis: 0 },
            text: TextAugment { mask_p: 0.0, mask_id: MASK_ID },
        }
    }

    pub fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1], got {p}")))
            }
        };
        prob("flip_p", self.image.flip_p)?;
        prob("blur_p", self.image.blur_p)?;
        prob("mask_p", self.text.mask_p)?;
        let (lo, hi) = self.image.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        if !(0.0..=1.0).contains(&self.image.jitter) {
            return Err(Error::Config(format!("jitter must be in [0, 1], got {}", self.image.jitter)));
        }
        if self.audio.max_time_width > cfg.audio_size.0 || self.audio.max_freq_width > cfg.audio_size.1 {
            return Err(Error::Config("audio mask width exceeds the spectrogram".into()));
        }
        if self.text.mask_id as usize >= cfg.vocab_size {
            return Err(Error::Config(format!("mask_id {} outside vocabulary", self.text.mask_id)));
        }
        Ok(())
    }
}

/// Draws one augmented view. Dimensions are taken from `cfg`.
pub fn augment(sample: &ModalitySample, aug: &AugmentationConfig, cfg: &EncoderConfig, rng: &mut impl Rng) -> ModalitySample {
    let payload = match &sample.payload {
        Payload::Image(px) => Payload::Image(augment_image(px, cfg.image_size, &aug.image, rng)),
        Payload::Audio(bins) => Payload::Audio(augment_audio(bins, cfg.audio_size, &aug.audio, rng)),
        Payload::Text(ids) => Payload::Text(
            ids.iter()
                .map(|&t| if aug.text.mask_p > 0.0 && rng.random::<f64>() < aug.text.mask_p { aug.text.mask_id } else { t })
                .collect(),
        ),
    };
    ModalitySample { payload, ..sample.clone() }
}

fn augment_image(px: &[f32], (h, w): (usize, usize), a: &ImageAugment, rng: &mut impl Rng) -> Vec<f32> {
    let mut out = random_resized_crop(px, h, w, a.crop_scale, rng);
    if a.flip_p > 0.0 && rng.random::<f64>() < a.flip_p {
        for plane in out.chunks_exact_mut(h * w) {
            for row in plane.chunks_exact_mut(w) {
                row.reverse();
            }
        }
    }
    if a.jitter > 0.0 {
        color_jitter(&mut out, h * w, a.jitter, rng);
    }
    if a.blur_p > 0.0 && rng.random::<f64>() < a.blur_p {
        let sigma = rng.random_range(0.1..2.0);
        out = gaussian_blur3(&out, h, w, sigma);
    }
    out
}

fn random_resized_crop(px: &[f32], h: usize, w: usize, (lo, hi): (f64, f64), rng: &mut impl Rng) -> Vec<f32> {
    let scale = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    if scale >= 1.0 {
        return px.to_vec();
    }
    let log_r = rng.random_range((3.0f64 / 4.0).ln()..=(4.0f64 / 3.0).ln());
    let ratio = log_r.exp();
    let area = scale * (h * w) as f64;
    let cw = ((area * ratio).sqrt().round() as usize).clamp(1, w);
    let ch = ((area / ratio).sqrt().round() as usize).clamp(1, h);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let mut out = vec![0.0f32; px.len()];
    for (plane_in, plane_out) in px.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        for y in 0..h {
            let sy = (y0 as f64 + (y as f64 + 0.5) * ch as f64 / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let (y_lo, fy) = (sy.floor() as usize, sy - sy.floor());
            let y_hi = (y_lo + 1).min(h - 1);
            for x in 0..w {
                let sx = (x0 as f64 + (x as f64 + 0.5) * cw as f64 / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
                let (x_lo, fx) = (sx.floor() as usize, sx - sx.floor());
                let x_hi = (x_lo + 1).min(w - 1);
                let p = |yy: usize, xx: usize| plane_in[yy * w + xx] as f64;
                let top = p(y_lo, x_lo) * (1.0 - fx) + p(y_lo, x_hi) * fx;
                let bot = p(y_hi, x_lo) * (1.0 - fx) + p(y_hi, x_hi) * fx;
                plane_out[y * w + x] = (top * (1.0 - fy) + bot * fy) as f32;
            }
        }
    }
    out
}

fn color_jitter(px: &mut [f32], plane: usize, strength: f64, rng: &mut impl Rng) {
    let s = 0.8 * strength;
    let brightness = rng.random_range(1.0 - s..=1.0 + s) as f32;
    let contrast = rng.random_range(1.0 - s..=1.0 + s) as f32;
    let saturation = rng.random_range(1.0 - s..=1.0 + s) as f32;
    for v in px.iter_mut() {
        *v *= brightness;
    }
    let gray = |px: &[f32], i: usize| 0.299 * px[i] + 0.587 * px[plane + i] + 0.114 * px[2 * plane + i];
    let mean = (0..plane).map(|i| gray(px, i)).sum::<f32>() / plane as f32;
    for v in px.iter_mut() {
        *v = (*v - mean) * contrast + mean;
    }
    for i in 0..plane {
        let g = gray(px, i);
        for c in 0..3 {
            let v = &mut px[c * plane + i];
            *v = (*v - g) * saturation + g;
        }
    }
    for v in px.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

fn gaussian_blur3(px: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let k1 = (-1.0 / (2.0 * sigma * sigma)).exp();
    let norm = 1.0 + 2.0 * k1;
    let k = [(k1 / norm) as f32, (1.0 / norm) as f32, (k1 / norm) as f32];
    let mut tmp = vec![0.0f32; px.len()];
    let mut out = vec![0.0f32; px.len()];
    // separable, clamped borders
    for (src, dst) in px.chunks_exact(h * w).zip(tmp.chunks_exact_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                let l = src[y * w + x.saturating_sub(1)];
                let r = src[y * w + (x + 1).min(w - 1)];
                dst[y * w + x] = k[0] * l + k[1] * src[y * w + x] + k[2] * r;
            }
        }
    }
    for (src, dst) in tmp.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                let u = src[y.saturating_sub(1) * w + x];
                let d = src[(y + 1).min(h - 1) * w + x];
                dst[y * w + x] = k[0] * u + k[1] * src[y * w + x] + k[2] * d;
            }
        }
    }
    out
}

fn augment_audio(bins: &[f32], (frames, freq): (usize, usize), a: &AudioAugment, rng: &mut impl Rng) -> Vec<f32> {
    let mut out = bins.to_vec();
    for _ in 0..a.masks_per_axis {
        if a.max_time_width > 0 {
            let width = rng.random_range(1..=a.max_time_width);
            let start = rng.random_range(0..=frames - width);
            out[start * freq..(start + width) * freq].fill(0.0);
        }
        if a.max_freq_width > 0 {
            let width = rng.random_range(1..=a.max_freq_width);
            let start = rng.random_range(0..=freq - width);
            for row in out.chunks_exact_mut(freq) {
                row[start..start + width].fill(0.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_corpus, SyntheticCorpusSpec};
    use crate::encoder::Modality;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus(m: Modality) -> Vec<ModalitySample> {
        generate_corpus(&SyntheticCorpusSpec::new(m, 2, 2, 0.2, 0, &EncoderConfig::desk())).unwrap()
    }

    #[test]
    fn identity_config_is_identity() {
        let cfg = EncoderConfig::desk();
        let aug = AugmentationConfig::identity();
        aug.validate(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for m in Modality::ALL {
            for s in corpus(m) {
                assert_eq!(augment(&s, &aug, &cfg, &mut rng), s);
            }
        }
    }

    #[test]
    fn full_time_mask_zeroes_a_whole_frame() {
        let cfg = EncoderConfig::desk();
        let mut aug = AugmentationConfig::identity();
        aug.audio = AudioAugment { max_time_width: cfg.audio_size.0, max_freq_width: 0, masks_per_axis: 1 };
        let (frames, freq) = cfg.audio_size;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = augment(&corpus(Modality::Audio)[0], &aug, &cfg, &mut rng);
            let Payload::Audio(v) = s.payload else { unreachable!() };
            assert!((0..frames).any(|t| v[t * freq..(t + 1) * freq].iter().all(|&x| x == 0.0)));
        }
    }

    #[test]
    fn same_state_same_view() {
        let cfg = EncoderConfig::desk();
        let aug = AugmentationConfig::desk(&cfg);
        for m in Modality::ALL {
            let s = &corpus(m)[1];
            let a = augment(s, &aug, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
            let b = augment(s, &aug, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
            let c = augment(s, &aug, &cfg, &mut ChaCha8Rng::seed_from_u64(10));
            assert_eq!(a, b);
            assert_ne!(a, c, "{m}");
        }
    }

    #[test]
    fn rejects_bad_probabilities() {
        let cfg = EncoderConfig::desk();
        let mut aug = AugmentationConfig::desk(&cfg);
        aug.image.flip_p = 1.5;
        assert!(aug.validate(&cfg).is_err());
        let mut aug = AugmentationConfig::desk(&cfg);
        aug.audio.max_time_width = cfg.audio_size.0 + 1;
        assert!(aug.validate(&cfg).is_err());
    }
}
