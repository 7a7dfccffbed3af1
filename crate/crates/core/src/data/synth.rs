//! Synthetic class-structured corpora for the three modalities.
//!
//! Class prototypes depend only on the class id, so any two corpora agree
//! on what class `c` looks like; the seed drives per-sample jitter and noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::tokenizer::tokenize_text;
use crate::encoder::{EncoderConfig, Modality, ModalitySample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpusSpec {
    pub modality: Modality,
    pub classes: usize,
    pub per_class: usize,
    pub noise: f64,
    pub seed: u64,
    pub image_size: (usize, usize),
    pub audio_size: (usize, usize),
    pub text_len: usize,
}

impl SyntheticCorpusSpec {
    pub fn new(modality: Modality, classes: usize, per_class: usize, noise: f64, seed: u64, cfg: &EncoderConfig) -> Self {
        SyntheticCorpusSpec {
            modality,
            classes,
            per_class,
            noise,
            seed,
            image_size: cfg.image_size,
            audio_size: cfg.audio_size,
            text_len: cfg.text_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("corpus needs at least 2 classes, got {}", self.classes)));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise level {} outside [0, 1]", self.noise)));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be positive".into()));
        }
        Ok(())
    }
}

fn class_rng(modality: Modality, class: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5EED_0000 + 1000 * modality.index() as u64 + class as u64)
}

fn sample_rng(seed: u64, salt: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ salt.rotate_left(17));
    r.set_stream(index as u64);
    r
}

fn hue_to_rgb(h: f64) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r as f32, g as f32, b as f32]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    /// Center as a fraction of height / width.
    pub cy: f64,
    pub cx: f64,
    /// Radius as a fraction of the smaller side.
    pub radius: f64,
    pub color: [f32; 3],
    pub square: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageScene {
    pub background: [f32; 3],
    pub blobs: Vec<Blob>,
}

fn image_prototype(class: usize, classes: usize) -> ImageScene {
    let mut rng = class_rng(Modality::Image, class);
    let hue = class as f64 / classes as f64;
    let n_blobs = 2 + class % 2;
    let blobs = (0..n_blobs)
        .map(|j| Blob {
            cy: rng.random_range(0.25..0.75),
            cx: rng.random_range(0.25..0.75),
            radius: rng.random_range(0.12..0.2),
            color: hue_to_rgb(hue + 0.08 * j as f64),
            square: (class + j) % 2 == 1,
        })
        .collect();
    ImageScene { background: [0.15, 0.15, 0.15], blobs }
}

/// Rasterizes a scene into `3 x h x w` channel-major pixels in `[0, 1]`.
pub fn render_image(scene: &ImageScene, size: (usize, usize), noise: f64, rng: &mut impl Rng) -> Vec<f32> {
    let (h, w) = size;
    let side = h.min(w) as f64;
    let mut px = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let mut color = scene.background;
            for b in &scene.blobs {
                let dy = (y as f64 + 0.5 - b.cy * h as f64) / side;
                let dx = (x as f64 + 0.5 - b.cx * w as f64) / side;
                let inside = if b.square {
                    dy.abs().max(dx.abs()) <= b.radius
                } else {
                    dy * dy + dx * dx <= b.radius * b.radius
                };
                if inside {
                    color = b.color;
                }
            }
            for (c, &v) in color.iter().enumerate() {
                let jitter = if noise > 0.0 { noise * (rng.random::<f64>() - 0.5) } else { 0.0 };
                px[c * h * w + y * w + x] = (v as f64 + jitter).clamp(0.0, 1.0) as f32;
            }
        }
    }
    px
}

fn jitter_scene(scene: &ImageScene, rng: &mut impl Rng) -> ImageScene {
    let mut s = scene.clone();
    for b in &mut s.blobs {
        b.cy += rng.random_range(-0.08..0.08);
        b.cx += rng.random_range(-0.08..0.08);
        b.radius *= rng.random_range(0.8..1.2);
        for c in &mut b.color {
            *c = (*c + rng.random_range(-0.08f32..0.08)).clamp(0.0, 1.0);
        }
    }
    for c in &mut s.background {
        *c = (*c + rng.random_range(-0.05f32..0.05)).clamp(0.0, 1.0);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramScene {
    /// (frequency bin, amplitude) of stationary harmonics.
    pub harmonics: Vec<(usize, f32)>,
    /// Pulse period and phase in frames, and amplitude.
    pub pulse: (usize, usize, f32),
    /// First and one-past-last active frame of the pulse train.
    pub span: (usize, usize),
    pub floor: f32,
    /// Slow amplitude modulation of the harmonics: depth, period, phase.
    pub envelope: (f32, usize, usize),
    /// One transient burst: start frame, start bin, frames, bins, amplitude.
    pub event: Option<(usize, usize, usize, usize, f32)>,
    /// Per-recording stationary tones without leakage.
    pub tones: Vec<(usize, f32)>,
}

fn audio_prototype(class: usize, freq_bins: usize, frames: usize) -> SpectrogramScene {
    let mut rng = class_rng(Modality::Audio, class);
    let base = (class * 5 + 1) % freq_bins;
    let step = 2 + class % 3;
    let n = 2 + class % 2;
    let harmonics = (0..n).map(|j| ((base + j * step) % freq_bins, rng.random_range(0.45f32..0.6))).collect();
    let period = 3 + class % 4;
    SpectrogramScene { harmonics, pulse: (period, class % period, 0.3), span: (0, frames), floor: 0.1, envelope: (0.0, 1, 0), event: None, tones: Vec::new() }
}

/// `frames x bins` row-major values in `[0, 1]`.
pub fn render_spectrogram(scene: &SpectrogramScene, size: (usize, usize), noise: f64, rng: &mut impl Rng) -> Vec<f32> {
    let (frames, bins) = size;
    let mut out = vec![scene.floor; frames * bins];
    let (depth, env_period, env_phase) = scene.envelope;
    for t in 0..frames {
        let row = &mut out[t * bins..(t + 1) * bins];
        let angle = 2.0 * std::f32::consts::PI * ((t + env_phase) % env_period.max(1)) as f32 / env_period.max(1) as f32;
        let env = 1.0 + depth * angle.sin();
        for &(f, a) in &scene.tones {
            if f < bins {
                row[f] += a;
            }
        }
        for &(f, a) in &scene.harmonics {
            let a = a * env;
            if f < bins {
                row[f] += a;
                // spectral leakage into neighbours
                if f > 0 {
                    row[f - 1] += 0.3 * a;
                }
                if f + 1 < bins {
                    row[f + 1] += 0.3 * a;
                }
            }
        }
        let (period, phase, amp) = scene.pulse;
        if t >= scene.span.0 && t < scene.span.1 && period > 0 && t % period == phase {
            for v in row.iter_mut() {
                *v += amp;
            }
        }
        if let Some((t0, f0, dt, df, amp)) = scene.event {
            if t >= t0 && t < t0 + dt {
                for v in row.iter_mut().skip(f0).take(df) {
                    *v += amp;
                }
            }
        }
        for v in row.iter_mut() {
            let jitter = if noise > 0.0 { noise * (rng.random::<f64>() - 0.5) } else { 0.0 };
            *v = (*v as f64 + jitter).clamp(0.0, 1.0) as f32;
        }
    }
    out
}

fn jitter_spectrogram(scene: &SpectrogramScene, rng: &mut impl Rng) -> SpectrogramScene {
    let mut s = scene.clone();
    for h in &mut s.harmonics {
        h.1 *= rng.random_range(0.75f32..1.25);
    }
    let (period, phase, amp) = s.pulse;
    let shift = rng.random_range(0..2);
    s.pulse = (period, (phase + shift) % period, amp * rng.random_range(0.75f32..1.25));
    s.floor += rng.random_range(-0.03f32..0.03);
    s.envelope = (rng.random_range(0.1f32..0.4), rng.random_range(8..33), rng.random_range(0..32));
    s
}

/// Adds a random transient burst; `size` is `(frames, bins)`.
fn add_event(scene: &mut SpectrogramScene, (frames, bins): (usize, usize), rng: &mut impl Rng) {
    let dt = rng.random_range(2..=4).min(frames);
    let df = rng.random_range(2..=3).min(bins);
    scene.event = Some((
        rng.random_range(0..=frames - dt),
        rng.random_range(0..=bins - df),
        dt,
        df,
        rng.random_range(0.25f32..0.45),
    ));
    let n = rng.random_range(1..=2);
    scene.tones = (0..n).map(|_| (rng.random_range(0..bins), rng.random_range(0.2f32..0.4))).collect();
}

const TEXT_ALPHABET: &[u8] = b" abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.,";

fn text_prototype(class: usize) -> Vec<u8> {
    let mut rng = class_rng(Modality::Text, class);
    // six preferred symbols per class, disjoint across the first 10 classes
    let mut pool: Vec<u8> = TEXT_ALPHABET[1..].to_vec();
    let start = (class * 6) % pool.len();
    pool.rotate_left(start);
    let mut set = pool[..6].to_vec();
    set.shuffle(&mut rng);
    set
}

fn render_text(preferred: &[u8], len: usize, noise: f64, rng: &mut impl Rng) -> Vec<u8> {
    let p_class = 0.8 - 0.5 * noise;
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < p_class {
                preferred[rng.random_range(0..preferred.len())]
            } else {
                TEXT_ALPHABET[rng.random_range(0..TEXT_ALPHABET.len())]
            }
        })
        .collect()
}

/// Labeled samples, classes interleaved (`sample i` has class `i % K`).
pub fn generate_corpus(spec: &SyntheticCorpusSpec) -> Result<Vec<ModalitySample>> {
    spec.validate()?;
    let n = spec.classes * spec.per_class;
    let salt = 0xC0 + spec.modality.index() as u64;
    let out = (0..n)
        .map(|i| {
            let class = i % spec.classes;
            let mut rng = sample_rng(spec.seed, salt, i);
            let sample = match spec.modality {
                Modality::Image => {
                    let scene = jitter_scene(&image_prototype(class, spec.classes), &mut rng);
                    ModalitySample::image(render_image(&scene, spec.image_size, spec.noise, &mut rng))
                }
                Modality::Audio => {
                    let (frames, _) = spec.audio_size;
                    let mut proto = audio_prototype(class, spec.audio_size.1, frames);
                    proto.span = (rng.random_range(0..=frames / 4), frames - rng.random_range(0..=frames / 4));
                    let mut scene = jitter_spectrogram(&proto, &mut rng);
                    add_event(&mut scene, spec.audio_size, &mut rng);
                    ModalitySample::audio(render_spectrogram(&scene, spec.audio_size, spec.noise, &mut rng))
                }
                Modality::Text => {
                    let bytes = render_text(&text_prototype(class), spec.text_len, spec.noise, &mut rng);
                    ModalitySample::text(tokenize_text(&bytes, spec.text_len))
                }
            };
            sample.with_label(class as u32)
        })
        .collect();
    Ok(out)
}

/// Template grammar for captions. Templates use the placeholders
/// `{class}`, `{place}`, `{size}` and `{shade}`.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionGrammar {
    pub templates: Vec<String>,
    pub class_names: Vec<String>,
    pub places: Vec<String>,
    pub sizes: Vec<String>,
    pub shades: Vec<String>,
}

/// Uppercase pseudo-words with pairwise disjoint letters, `ABCA`, `DEFD`, ...
pub fn default_class_names(k: usize) -> Vec<String> {
    (0..k)
        .map(|c| {
            let l = |o: usize| (b'A' + ((3 * c + o) % 26) as u8) as char;
            [l(0), l(1), l(2), l(0)].iter().collect()
        })
        .collect()
}

impl CaptionGrammar {
    pub fn new(classes: usize) -> Self {
        let words = |w: &[&str]| w.iter().map(|s| s.to_string()).collect();
        CaptionGrammar {
            templates: words(&["{size} {class} {place} {shade}", "{class} {place} {size} {shade}"]),
            class_names: default_class_names(classes),
            places: words(&["nw", "ne", "sw", "se"]),
            sizes: words(&["big", "wee"]),
            shades: words(&["dim", "lit"]),
        }
    }

    pub fn single_template(mut self, template: &str) -> Self {
        self.templates = vec![template.to_string()];
        self
    }

    pub fn render(&self, template: usize, attrs: &PairAttributes) -> String {
        self.templates[template]
            .replace("{class}", &self.class_names[attrs.class])
            .replace("{place}", &self.places[attrs.place])
            .replace("{size}", &self.sizes[attrs.size])
            .replace("{shade}", &self.shades[attrs.shade])
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.templates.is_empty() || self.places.is_empty() || self.sizes.is_empty() || self.shades.is_empty() {
            return Err(Error::Config("caption grammar has an empty word list".into()));
        }
        if self.class_names.len() < classes {
            return Err(Error::Config(format!(
                "grammar names {} classes, corpus needs {classes}",
                self.class_names.len()
            )));
        }
        Ok(())
    }
}

/// Latent factors shared by both sides of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairAttributes {
    pub class: usize,
    pub place: usize,
    pub size: usize,
    pub shade: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedCorpusSpec {
    pub base: SyntheticCorpusSpec,
    /// Total number of pairs.
    pub pairs: usize,
}

fn paired_image(attrs: &PairAttributes, classes: usize, spec: &SyntheticCorpusSpec, rng: &mut impl Rng) -> Vec<f32> {
    let proto = image_prototype(attrs.class, classes);
    let (qy, qx) = ((attrs.place / 2) as f64, (attrs.place % 2) as f64);
    let scale = if attrs.size == 0 { 1.25 } else { 0.65 };
    let mut scene = proto.clone();
    let n = scene.blobs.len() as f64;
    for (j, b) in scene.blobs.iter_mut().enumerate() {
        // cluster the blobs inside the chosen quadrant
        b.cy = 0.25 + 0.5 * qy + 0.12 * (j as f64 - (n - 1.0) / 2.0);
        b.cx = 0.25 + 0.5 * qx + 0.08 * (j as f64 - (n - 1.0) / 2.0);
        b.radius *= scale;
    }
    scene.background = if attrs.shade == 0 { [0.08, 0.08, 0.08] } else { [0.6, 0.6, 0.6] };
    let scene = jitter_scene(&scene, rng);
    render_image(&scene, spec.image_size, spec.noise, rng)
}

fn paired_audio(attrs: &PairAttributes, spec: &SyntheticCorpusSpec, rng: &mut impl Rng) -> Vec<f32> {
    let (frames, bins) = spec.audio_size;
    let mut scene = audio_prototype(attrs.class, bins, frames);
    let quarter = frames / 4;
    scene.span = (attrs.place * quarter, (attrs.place + 1) * quarter);
    scene.pulse.2 = 0.5;
    let gain = if attrs.size == 0 { 1.3 } else { 0.6 };
    for h in &mut scene.harmonics {
        h.1 *= gain;
    }
    scene.floor = if attrs.shade == 0 { 0.05 } else { 0.3 };
    let scene = jitter_spectrogram(&scene, rng);
    render_spectrogram(&scene, spec.audio_size, spec.noise, rng)
}

/// Pairs whose side A renders `spec.base.modality` (image or audio) and
/// side B is a caption naming the class and the rendered attributes.
/// Returned as `(side_a, side_b)`; `pair_id` is the pair index.
pub fn generate_paired_corpus(
    spec: &PairedCorpusSpec,
    grammar: &CaptionGrammar,
) -> Result<(Vec<ModalitySample>, Vec<ModalitySample>)> {
    let base = &spec.base;
    base.validate()?;
    grammar.validate(base.classes)?;
    if base.modality == Modality::Text {
        return Err(Error::Config("paired corpus side A must be image or audio".into()));
    }
    let mut a = Vec::with_capacity(spec.pairs);
    let mut b = Vec::with_capacity(spec.pairs);
    for i in 0..spec.pairs {
        let mut rng = sample_rng(base.seed, 0xDA1 + base.modality.index() as u64, i);
        let attrs = PairAttributes {
            class: i % base.classes,
            place: rng.random_range(0..grammar.places.len().min(4)),
            size: rng.random_range(0..grammar.sizes.len().min(2)),
            shade: rng.random_range(0..grammar.shades.len().min(2)),
        };
        let template = rng.random_range(0..grammar.templates.len());
        let side_a = match base.modality {
            Modality::Image => ModalitySample::image(paired_image(&attrs, base.classes, base, &mut rng)),
            _ => ModalitySample::audio(paired_audio(&attrs, base, &mut rng)),
        };
        let caption = grammar.render(template, &attrs);
        let side_b = ModalitySample::text(tokenize_text(caption.as_bytes(), base.text_len));
        a.push(side_a.with_label(attrs.class as u32).with_pair_id(i as u64));
        b.push(side_b.with_label(attrs.class as u32).with_pair_id(i as u64));
    }
    Ok((a, b))
}

/// Deterministic shuffled split; returns `(train, held_out)`.
pub fn train_test_split<T: Clone>(items: &[T], held_out_frac: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5711));
    let n_test = ((items.len() as f64) * held_out_frac).round() as usize;
    let (test, train) = idx.split_at(n_test.min(items.len()));
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.iter().map(|&i| items[i].clone()).collect::<Vec<T>>()
    };
    (pick(train), pick(test))
}
