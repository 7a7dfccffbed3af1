//! Subcommand implementations. Every command writes its outputs under the
//! `--out` directory together with `config.resolved` and `seed`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use omnic::adapt::{attach_sbora, count_trainable_fraction, finetune_sbora, merge_sbora, train_linear_probe};
use omnic::align::{cache_features, class_retrieval_at_k, retrieval_at_k, train_alignment, zero_shot_classify, AlignmentHead, PairedFeatureCache};
use omnic::data::synth::{generate_corpus, generate_paired_corpus, train_test_split, CaptionGrammar, PairedCorpusSpec, SyntheticCorpusSpec};
use omnic::data::{load_corpus, save_corpus, write_manifest, Checkpoint};
use omnic::encoder::model::BLOCK_LINEARS;
use omnic::eval::{
    attention_csv, attention_records, average_attention_map, embedding_csv, export_embeddings_2d, knn_classify, metric_table,
    modality_purity, representation_metrics,
};
use omnic::pretrain::{balance_datasets, pretrain_to_checkpoint, Stores};
use omnic::{Error, Modality, ModalitySample, OmniEncoder, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::Command;

const FEATURE_BATCH: usize = 128;

pub fn run(cmd: Command, cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.resolved"), cfg.resolved_text())?;
    fs::write(out.join("seed"), format!("{}\n", cfg.seed))?;
    match cmd {
        Command::GenData => gen_data(cfg, out),
        Command::Pretrain => pretrain(cfg, out),
        Command::Knn => knn(cfg, out),
        Command::Probe => probe(cfg, out),
        Command::Sbora => sbora(cfg, out),
        Command::Align => align(cfg, out),
        Command::Zeroshot => zeroshot(cfg, out),
        Command::Metrics => metrics(cfg, out),
        Command::Attn => attn(cfg, out),
        Command::ExportEmb => export_emb(cfg, out),
    }
}

type Split = (Vec<ModalitySample>, Vec<ModalitySample>);

fn generate_split(cfg: &RunConfig, m: Modality) -> Result<Split> {
    let spec = SyntheticCorpusSpec::new(m, cfg.classes, cfg.per_class, cfg.noise, cfg.seed, &cfg.encoder);
    let corpus = generate_corpus(&spec)?;
    Ok(train_test_split(&corpus, cfg.held_out, cfg.seed))
}

fn generate_paired(cfg: &RunConfig) -> Result<Split> {
    let base = SyntheticCorpusSpec::new(cfg.paired_modality, cfg.paired_classes, 1, cfg.noise, cfg.seed, &cfg.encoder);
    let grammar = CaptionGrammar::new(cfg.paired_classes);
    let (a, b) = generate_paired_corpus(&PairedCorpusSpec { base, pairs: cfg.pairs }, &grammar)?;
    let (a_tr, a_te) = train_test_split(&a, cfg.held_out, cfg.seed);
    let (b_tr, b_te) = train_test_split(&b, cfg.held_out, cfg.seed);
    Ok(([a_tr, b_tr].concat(), [a_te, b_te].concat()))
}

/// Reads a split from `data_dir` when set, otherwise regenerates it.
fn split(cfg: &RunConfig, m: Modality) -> Result<Split> {
    match &cfg.data_dir {
        Some(dir) => Ok((load_corpus(dir.join(format!("{m}_train.omnc")))?, load_corpus(dir.join(format!("{m}_test.omnc")))?)),
        None => generate_split(cfg, m),
    }
}

fn paired_split(cfg: &RunConfig) -> Result<Split> {
    match &cfg.data_dir {
        Some(dir) => Ok((load_corpus(dir.join("paired_train.omnc"))?, load_corpus(dir.join("paired_test.omnc"))?)),
        None => generate_paired(cfg),
    }
}

/// The checkpoint named by `checkpoint`, or a fresh model from `seed`.
fn model(cfg: &RunConfig) -> Result<OmniEncoder<f32>> {
    match &cfg.checkpoint {
        Some(p) => OmniEncoder::from_checkpoint(&Checkpoint::read(p)?),
        None => OmniEncoder::new(cfg.encoder.clone(), cfg.seed),
    }
}

fn labels(samples: &[ModalitySample]) -> Result<Vec<u32>> {
    samples.iter().map(|s| s.label.ok_or_else(|| Error::Data(format!("{} sample without a label", s.modality())))).collect()
}

fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    for m in Modality::ALL {
        let (train, test) = generate_split(cfg, m)?;
        for (name, s) in [("train", &train), ("test", &test)] {
            save_corpus(out.join(format!("{m}_{name}.omnc")), s)?;
            write_manifest(out.join(format!("{m}_{name}.csv")), s)?;
        }
    }
    let (train, test) = generate_paired(cfg)?;
    for (name, s) in [("train", &train), ("test", &test)] {
        save_corpus(out.join(format!("paired_{name}.omnc")), s)?;
        write_manifest(out.join(format!("paired_{name}.csv")), s)?;
    }
    let mut classes = String::from("class,name\n");
    for (i, n) in CaptionGrammar::new(cfg.paired_classes).class_names.iter().enumerate() {
        let _ = writeln!(classes, "{i},{n}");
    }
    fs::write(out.join("classes.csv"), classes)?;
    Ok(())
}

fn pretrain(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut train = Vec::new();
    for m in Modality::ALL {
        train.push(split(cfg, m)?.0);
    }
    let [image, audio, text]: [Vec<ModalitySample>; 3] = train.try_into().expect("three modalities");
    let stores = Stores::new(image, audio, text)?;
    let target = stores.sizes().into_iter().min().unwrap_or(0);
    let stores = balance_datasets(&stores, target, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut enc = model(cfg)?;
    let (ck, outcome) = pretrain_to_checkpoint(&mut enc, &stores, &cfg.pretrain, cfg.seed)?;
    ck.write(out.join("model.omnc"))?;
    outcome.write_log(out.join("loss_log.csv"))?;
    match outcome.aborted {
        Some(why) => Err(Error::Numeric(format!("pretraining aborted: {why}"))),
        None => Ok(()),
    }
}

fn knn(cfg: &RunConfig, out: &Path) -> Result<()> {
    let enc = model(cfg)?;
    let mut csv = String::from("modality,k,temperature,accuracy\n");
    for &m in &cfg.modalities {
        let (train, test) = split(cfg, m)?;
        let xtr = enc.features(&train, FEATURE_BATCH)?;
        let xte = enc.features(&test, FEATURE_BATCH)?;
        let pred = knn_classify(&xtr, &labels(&train)?, &xte, cfg.knn_k, cfg.knn_temperature)?;
        let acc = omnic::adapt::probe::accuracy(&pred, &labels(&test)?);
        let _ = writeln!(csv, "{m},{},{},{acc}", cfg.knn_k, cfg.knn_temperature);
    }
    fs::write(out.join("knn.csv"), csv)?;
    Ok(())
}

fn probe(cfg: &RunConfig, out: &Path) -> Result<()> {
    let enc = model(cfg)?;
    let mut csv = String::from("modality,train_accuracy,test_accuracy\n");
    for &m in &cfg.modalities {
        let (train, test) = split(cfg, m)?;
        let r = train_linear_probe(&enc, &train, &test, &cfg.probe, cfg.seed)?;
        let _ = writeln!(csv, "{m},{},{}", r.train_accuracy, r.test_accuracy);
    }
    fs::write(out.join("probe.csv"), csv)?;
    Ok(())
}

fn max_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

fn sbora(cfg: &RunConfig, out: &Path) -> Result<()> {
    let base = model(cfg)?;
    let mut csv = String::from("modality,rank,alpha,trainable_fraction,test_accuracy,merge_max_abs_diff\n");
    for &m in &cfg.modalities {
        let (train, test) = split(cfg, m)?;
        let mut enc = base.clone();
        attach_sbora(&mut enc, &BLOCK_LINEARS, cfg.sbora_rank, cfg.sbora_alpha, cfg.seed)?;
        let fraction = count_trainable_fraction(&enc);
        let r = finetune_sbora(&mut enc, &train, &test, &cfg.sbora, cfg.seed)?;
        let merged = merge_sbora(&enc)?;
        let diff = max_abs_diff(&enc.features(&test, FEATURE_BATCH)?, &merged.features(&test, FEATURE_BATCH)?);
        enc.to_checkpoint(&[("seed", cfg.seed.to_string())]).write(out.join(format!("sbora_{m}.omnc")))?;
        merged.to_checkpoint(&[("seed", cfg.seed.to_string())]).write(out.join(format!("merged_{m}.omnc")))?;
        let _ = writeln!(csv, "{m},{},{},{fraction},{},{diff}", cfg.sbora_rank, cfg.sbora_alpha, r.test_accuracy);
    }
    fs::write(out.join("sbora.csv"), csv)?;
    Ok(())
}

fn align(cfg: &RunConfig, out: &Path) -> Result<()> {
    let enc = model(cfg)?;
    let (train, test) = paired_split(cfg)?;
    let a = cfg.paired_modality;
    let train_cache = cache_features(&enc, a, Modality::Text, &train)?;
    let test_cache = cache_features(&enc, a, Modality::Text, &test)?;
    train_cache.write(out.join("cache_train"))?;
    test_cache.write(out.join("cache_test"))?;
    let mut head = AlignmentHead::new(a, Modality::Text, enc.cfg.embed_dim, enc.cfg.proj_dim, cfg.seed)?;
    let log = train_alignment(&train_cache, &mut head, &cfg.align, cfg.seed)?;
    head.to_checkpoint().write(out.join("head.omnc"))?;
    let mut loss = String::from("step,loss\n");
    for (i, l) in log.iter().enumerate() {
        let _ = writeln!(loss, "{i},{l}");
    }
    fs::write(out.join("align_loss.csv"), loss)?;
    fs::write(out.join("retrieval.csv"), retrieval_table(&test_cache, &head)?)?;
    Ok(())
}

fn retrieval_table(cache: &PairedFeatureCache, head: &AlignmentHead) -> Result<String> {
    let (a, b) = (head.modality_a, head.modality_b);
    let mut csv = String::from("level,direction,k,recall\n");
    for k in [1, 5, 10].into_iter().filter(|&k| k <= cache.len()) {
        for (level, (ab, ba)) in [("pair", retrieval_at_k(cache, head, k)?), ("class", class_retrieval_at_k(cache, head, k)?)] {
            let _ = writeln!(csv, "{level},{a}->{b},{k},{ab}");
            let _ = writeln!(csv, "{level},{b}->{a},{k},{ba}");
        }
    }
    Ok(csv)
}

fn zeroshot(cfg: &RunConfig, out: &Path) -> Result<()> {
    let enc = model(cfg)?;
    let dir = cfg.align_dir.as_deref().ok_or_else(|| Error::Config("`align_dir` must name an `align` output directory".into()))?;
    let head = AlignmentHead::from_checkpoint(&Checkpoint::read(dir.join("head.omnc"))?)?;
    let (_, test) = paired_split(cfg)?;
    let queries: Vec<ModalitySample> = test.into_iter().filter(|s| s.modality() == head.modality_a).collect();
    let truth = labels(&queries)?;
    let prompts = CaptionGrammar::new(cfg.paired_classes).class_names;
    let x = enc.features(&queries, FEATURE_BATCH)?;
    let pred = zero_shot_classify(&x, &prompts, &enc, &head)?;
    let acc = omnic::adapt::probe::accuracy(&pred, &truth);
    fs::write(out.join("zeroshot.csv"), format!("modality,classes,samples,accuracy\n{},{},{},{acc}\n", head.modality_a, prompts.len(), queries.len()))?;
    let mut csv = String::from("index,label,prediction\n");
    for (i, (y, p)) in truth.iter().zip(&pred).enumerate() {
        let _ = writeln!(csv, "{i},{y},{p}");
    }
    fs::write(out.join("predictions.csv"), csv)?;
    Ok(())
}

fn metrics(cfg: &RunConfig, out: &Path) -> Result<()> {
    let enc = model(cfg)?;
    let mut reports = Vec::new();
    let mut groups = Vec::new();
    for &m in &cfg.modalities {
        let (_, test) = split(cfg, m)?;
        reports.push(representation_metrics(&enc, &test, &cfg.pretrain.augment, cfg.seed)?);
        groups.push((m, enc.features(&test, FEATURE_BATCH)?.to_f64()));
    }
    fs::write(out.join("metrics.csv"), metric_table(&reports))?;
    if groups.len() >= 2 {
        fs::write(out.join("purity.csv"), format!("modalities,purity\n{},{}\n", groups.len(), modality_purity(&groups)?))?;
    }
    Ok(())
}

fn attn(cfg: &RunConfig, out: &Path) -> Result<()> {
    let enc = model(cfg)?;
    for &m in &cfg.modalities {
        let (_, test) = split(cfg, m)?;
        let map = average_attention_map(&attention_records(&enc, &test, FEATURE_BATCH)?)?;
        fs::write(out.join(format!("attention_{m}.csv")), attention_csv(&map))?;
    }
    Ok(())
}

fn export_emb(cfg: &RunConfig, out: &Path) -> Result<()> {
    let enc = model(cfg)?;
    let (mut data, mut mods, mut labs) = (Vec::new(), Vec::new(), Vec::new());
    for &m in &cfg.modalities {
        let (_, test) = split(cfg, m)?;
        data.extend(enc.features(&test, FEATURE_BATCH)?.to_f64().data().iter().copied());
        mods.extend(test.iter().map(|s| s.modality()));
        labs.extend(test.iter().map(|s| s.label));
    }
    let x = Tensor::from_vec(&[mods.len(), enc.cfg.embed_dim], data)?;
    let points = export_embeddings_2d(&x, cfg.export_method)?;
    fs::write(out.join("embeddings.csv"), embedding_csv(&points, &mods, &labs)?)?;
    Ok(())
}
