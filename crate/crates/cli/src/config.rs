//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::path::PathBuf;

use indexmap::IndexMap;
use omnic::adapt::ProbeConfig;
use omnic::align::AlignConfig;
use omnic::eval::ExportMethod;
use omnic::pretrain::{AugmentationConfig, ContrastiveConfig, OptimizerConfig, PretrainConfig, ScheduleMode};
use omnic::{EncoderConfig, Error, Modality, Result};

pub const SEED_ENV: &str = "OMNIC_SEED";

/// Every accepted key with its default, in echo order. `auto` mask widths
/// resolve to a quarter of the matching spectrogram axis.
fn defaults() -> IndexMap<String, String> {
    let mut d: IndexMap<String, String> = IndexMap::new();
    let mut put = |k: &str, v: &str| {
        d.insert(k.to_string(), v.to_string());
    };
    put("seed", "0");
    for (k, v) in EncoderConfig::desk().to_pairs() {
        put(&k, &v);
    }
    for (k, v) in [
        ("temperature", "0.05"),
        ("batch_size", "32"),
        ("epochs", "30"),
        ("lr", "0.001"),
        ("min_lr", "0.00001"),
        ("weight_decay", "0.1"),
        ("warmup_epochs", "5"),
        ("schedule", "cyclic"),
        ("crop_scale_min", "0.2"),
        ("crop_scale_max", "1.0"),
        ("flip_p", "0.5"),
        ("jitter", "0.4"),
        ("blur_p", "0.5"),
        ("time_mask_width", "auto"),
        ("freq_mask_width", "auto"),
        ("masks_per_axis", "2"),
        ("text_mask_p", "0.15"),
        ("classes", "4"),
        ("per_class", "256"),
        ("noise", "0.3"),
        ("held_out", "0.25"),
        ("paired_classes", "8"),
        ("pairs", "512"),
        ("paired_modality", "image"),
        ("probe_epochs", "40"),
        ("probe_batch", "16"),
        ("sbora_rank", "8"),
        ("sbora_alpha", "8"),
        ("sbora_epochs", "40"),
        ("align_epochs", "100"),
        ("align_batch", "128"),
        ("knn_k", "20"),
        ("knn_temperature", "0.07"),
        ("modality", "all"),
        ("export_method", "pca"),
        ("data_dir", ""),
        ("checkpoint", ""),
        ("align_dir", ""),
    ] {
        put(k, v);
    }
    d
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub classes: usize,
    pub per_class: usize,
    pub noise: f64,
    pub held_out: f64,
    pub paired_classes: usize,
    pub pairs: usize,
    pub paired_modality: Modality,
    pub probe: ProbeConfig,
    pub sbora_rank: usize,
    pub sbora_alpha: f64,
    pub sbora: ProbeConfig,
    pub align: AlignConfig,
    pub knn_k: usize,
    pub knn_temperature: f64,
    pub modalities: Vec<Modality>,
    pub export_method: ExportMethod,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub align_dir: Option<PathBuf>,
    /// Fully resolved document, in key order.
    pub resolved: IndexMap<String, String>,
}

impl RunConfig {
    pub fn resolved_text(&self) -> String {
        self.resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_document(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = parse_assignment(line).map_err(|_| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        out.insert(k, v);
    }
    Ok(out)
}

pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("expected `key=value`, got `{s}`")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("empty key in `{s}`")));
    }
    Ok((k.to_string(), v.trim().trim_matches('"').to_string()))
}

/// Layers sources lowest first: defaults, `OMNIC_SEED`, the file, then
/// `--set` overrides.
pub fn resolve(
    env_seed: Option<&str>,
    file: &BTreeMap<String, String>,
    overrides: &[(String, String)],
) -> Result<RunConfig> {
    let mut doc = defaults();
    if let Some(s) = env_seed {
        doc.insert("seed".into(), s.trim().to_string());
    }
    for (k, v) in file.iter().map(|(k, v)| (k, v)).chain(overrides.iter().map(|(k, v)| (k, v))) {
        match doc.get_mut(k.as_str()) {
            Some(slot) => *slot = v.clone(),
            None => return Err(Error::Config(format!("unknown key `{k}`"))),
        }
    }
    validate_config(doc)
}

fn named<T: std::str::FromStr>(doc: &IndexMap<String, String>, key: &str) -> Result<T> {
    let v = &doc[key];
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn range_err(key: &str, what: &str) -> Error {
    Error::Config(format!("`{key}` {what}"))
}

/// Type- and range-checks a complete document.
pub fn validate_config(mut doc: IndexMap<String, String>) -> Result<RunConfig> {
    let mut encoder = EncoderConfig::desk();
    for (k, _) in EncoderConfig::desk().to_pairs() {
        encoder.set(&k, &doc[&k]).map_err(|e| Error::Config(format!("`{k}`: {e}")))?;
    }
    encoder.validate()?;
    for (key, axis) in [("time_mask_width", encoder.audio_size.0), ("freq_mask_width", encoder.audio_size.1)] {
        if doc[key] == "auto" {
            doc.insert(key.into(), (axis / 4).to_string());
        }
    }
    let pos_int = |doc: &IndexMap<String, String>, key: &str| -> Result<usize> {
        let v: usize = named(doc, key)?;
        if v == 0 {
            return Err(range_err(key, "must be positive"));
        }
        Ok(v)
    };
    let unit = |doc: &IndexMap<String, String>, key: &str| -> Result<f64> {
        let v: f64 = named(doc, key)?;
        if !(0.0..=1.0).contains(&v) {
            return Err(range_err(key, "must be in [0, 1]"));
        }
        Ok(v)
    };
    let positive = |doc: &IndexMap<String, String>, key: &str| -> Result<f64> {
        let v: f64 = named(doc, key)?;
        if !(v > 0.0 && v.is_finite()) {
            return Err(range_err(key, "must be positive"));
        }
        Ok(v)
    };

    let temperature = positive(&doc, "temperature")?;
    let batch_size = pos_int(&doc, "batch_size")?;
    let epochs: usize = named(&doc, "epochs")?;
    let lr = positive(&doc, "lr")?;
    let min_lr: f64 = named(&doc, "min_lr")?;
    if !(0.0..=lr).contains(&min_lr) {
        return Err(range_err("min_lr", "must be in [0, lr]"));
    }
    let weight_decay: f64 = named(&doc, "weight_decay")?;
    if !(weight_decay >= 0.0) {
        return Err(range_err("weight_decay", "must be non-negative"));
    }
    let warmup: usize = named(&doc, "warmup_epochs")?;
    let schedule = match doc["schedule"].as_str() {
        "cyclic" => ScheduleMode::Cyclic,
        "random" => ScheduleMode::Random,
        _ => return Err(range_err("schedule", "must be `cyclic` or `random`")),
    };
    let mut augment = AugmentationConfig::desk(&encoder);
    augment.image.crop_scale = (named(&doc, "crop_scale_min")?, named(&doc, "crop_scale_max")?);
    let (lo, hi) = augment.image.crop_scale;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(range_err("crop_scale_min", "and crop_scale_max must satisfy 0 < min <= max <= 1"));
    }
    augment.image.flip_p = unit(&doc, "flip_p")?;
    augment.image.jitter = unit(&doc, "jitter")?;
    augment.image.blur_p = unit(&doc, "blur_p")?;
    augment.audio.max_time_width = named(&doc, "time_mask_width")?;
    if augment.audio.max_time_width > encoder.audio_size.0 {
        return Err(range_err("time_mask_width", "exceeds the time axis"));
    }
    augment.audio.max_freq_width = named(&doc, "freq_mask_width")?;
    if augment.audio.max_freq_width > encoder.audio_size.1 {
        return Err(range_err("freq_mask_width", "exceeds the frequency axis"));
    }
    augment.audio.masks_per_axis = named(&doc, "masks_per_axis")?;
    augment.text.mask_p = unit(&doc, "text_mask_p")?;
    let pretrain = PretrainConfig {
        contrastive: ContrastiveConfig { temperature, batch_size },
        augment,
        optimizer: OptimizerConfig::new(lr, min_lr, weight_decay, warmup.min(epochs), epochs),
        schedule,
    };

    let classes = pos_int(&doc, "classes")?;
    if classes < 2 {
        return Err(range_err("classes", "must be at least 2"));
    }
    let paired_classes = pos_int(&doc, "paired_classes")?;
    if paired_classes < 2 {
        return Err(range_err("paired_classes", "must be at least 2"));
    }
    let paired_modality: Modality = named(&doc, "paired_modality")?;
    if paired_modality == Modality::Text {
        return Err(range_err("paired_modality", "must be image or audio"));
    }
    let held_out = unit(&doc, "held_out")?;
    if held_out == 0.0 || held_out == 1.0 {
        return Err(range_err("held_out", "must be strictly between 0 and 1"));
    }
    let downstream = |epochs_key: &str, batch: usize| -> Result<ProbeConfig> {
        let epochs: usize = named(&doc, epochs_key)?;
        let mut p = ProbeConfig::default();
        p.optimizer.epochs = epochs;
        p.optimizer.warmup_epochs = p.optimizer.warmup_epochs.min(epochs);
        p.batch_size = batch;
        Ok(p)
    };
    let probe = downstream("probe_epochs", pos_int(&doc, "probe_batch")?)?;
    let sbora = downstream("sbora_epochs", pos_int(&doc, "probe_batch")?)?;
    let sbora_rank = pos_int(&doc, "sbora_rank")?;
    if sbora_rank > encoder.embed_dim {
        return Err(range_err("sbora_rank", "exceeds the embedding width"));
    }
    let align_batch = pos_int(&doc, "align_batch")?;
    if !(2..=256).contains(&align_batch) {
        return Err(range_err("align_batch", "must be in [2, 256]"));
    }
    let mut align = AlignConfig::desk(named(&doc, "align_epochs")?);
    align.batch_size = align_batch;
    let modalities = match doc["modality"].as_str() {
        "all" => Modality::ALL.to_vec(),
        m => vec![m.parse().map_err(|_| range_err("modality", "must be image, audio, text or all"))?],
    };
    let path = |key: &str| (!doc[key].is_empty()).then(|| PathBuf::from(&doc[key]));
    Ok(RunConfig {
        seed: named(&doc, "seed")?,
        pretrain,
        classes,
        per_class: pos_int(&doc, "per_class")?,
        noise: unit(&doc, "noise")?,
        held_out,
        paired_classes,
        pairs: pos_int(&doc, "pairs")?,
        paired_modality,
        probe,
        sbora_rank,
        sbora_alpha: positive(&doc, "sbora_alpha")?,
        sbora,
        align,
        knn_k: pos_int(&doc, "knn_k")?,
        knn_temperature: positive(&doc, "knn_temperature")?,
        modalities,
        export_method: named(&doc, "export_method")?,
        data_dir: path("data_dir"),
        checkpoint: path("checkpoint"),
        align_dir: path("align_dir"),
        encoder,
        resolved: doc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_desk_defaults() {
        let c = resolve(None, &BTreeMap::new(), &[]).unwrap();
        assert_eq!(c.encoder, EncoderConfig::desk());
        assert_eq!(c.seed, 0);
        assert_eq!(c.resolved["time_mask_width"], (EncoderConfig::desk().audio_size.0 / 4).to_string());
    }

    #[test]
    fn negative_temperature_names_the_key() {
        let err = resolve(None, &BTreeMap::new(), &[("temperature".into(), "-1".into())]).unwrap_err();
        assert!(err.to_string().contains("temperature"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let file = parse_document("epochz = 3\n").unwrap();
        assert!(resolve(None, &file, &[]).unwrap_err().to_string().contains("epochz"));
    }

    #[test]
    fn precedence() {
        let file = parse_document("seed = 5 # from file\nepochs = 7\n").unwrap();
        let c = resolve(Some("9"), &file, &[("epochs".into(), "2".into())]).unwrap();
        assert_eq!((c.seed, c.pretrain.optimizer.epochs), (5, 2));
        let c = resolve(Some("9"), &BTreeMap::new(), &[]).unwrap();
        assert_eq!(c.seed, 9);
        let c = resolve(None, &file, &[]).unwrap();
        assert_eq!(c.pretrain.optimizer.epochs, 7);
    }
}
