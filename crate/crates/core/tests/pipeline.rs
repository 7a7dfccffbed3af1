//! End-to-end properties of the data, training and evaluation pieces
//! that sit between the unit tests and the acceptance run.

mod common;

use omnic::adapt::{attach_sbora, finetune_sbora, fit_probe, train_linear_probe, ProbeConfig};
use omnic::align::{class_retrieval_at_k, retrieval_at_k, AlignmentHead, PairedFeatureCache};
use omnic::autodiff::Tape;
use omnic::data::synth::{generate_corpus, generate_paired_corpus, train_test_split, CaptionGrammar, PairedCorpusSpec, SyntheticCorpusSpec};
use omnic::data::tokenizer::detokenize;
use omnic::data::FeatureCache;
use omnic::encoder::model::BLOCK_LINEARS;
use omnic::encoder::params::Bound;
use omnic::encoder::sample::Payload;
use omnic::pretrain::{balance_datasets, contrastive_step_loss, Stores};
use omnic::pretrain::augment::{augment, AugmentationConfig};
use omnic::pretrain::optim::OptimizerConfig;
use omnic::{EncoderConfig, HeadMode, Modality, ModalitySample, OmniEncoder, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(m: Modality, per_class: usize, seed: u64) -> Vec<ModalitySample> {
    generate_corpus(&SyntheticCorpusSpec::new(m, 4, per_class, 0.3, seed, &EncoderConfig::desk())).unwrap()
}

fn labels(s: &[ModalitySample]) -> Vec<u32> {
    s.iter().map(|x| x.label.unwrap()).collect()
}

/// Raw pixels and spectrogram bins as-is; text as a byte histogram.
fn raw_features(s: &[ModalitySample]) -> Tensor<f32> {
    let rows: Vec<Vec<f32>> = s
        .iter()
        .map(|x| match &x.payload {
            Payload::Image(v) | Payload::Audio(v) => v.clone(),
            Payload::Text(ids) => {
                let mut h = vec![0.0; 258];
                ids.iter().for_each(|&i| h[i as usize] += 1.0);
                h
            }
        })
        .collect();
    Tensor::from_vec(&[rows.len(), rows[0].len()], rows.concat()).unwrap()
}

#[test]
fn synthetic_classes_are_linearly_separable_from_raw_inputs() {
    let cfg = ProbeConfig { optimizer: OptimizerConfig::new(1e-2, 1e-4, 0.0, 2, 30), batch_size: 16 };
    for m in Modality::ALL {
        let (train, test) = train_test_split(&corpus(m, 64, 4), 0.25, 4);
        let head = fit_probe(&raw_features(&train), &labels(&train), 4, &cfg, 0).unwrap();
        let acc = head.accuracy(&raw_features(&test), &labels(&test)).unwrap();
        assert!(acc >= 0.95, "{m:?}: {acc}");
    }
}

#[test]
fn captions_follow_the_grammar_with_balanced_words() {
    let grammar = CaptionGrammar::new(8);
    let cfg = EncoderConfig::desk();
    let pairs = 2048;
    let base = SyntheticCorpusSpec::new(Modality::Image, 8, 1, 0.3, 6, &cfg);
    let (a, b) = generate_paired_corpus(&PairedCorpusSpec { base, pairs }, &grammar).unwrap();
    assert_eq!(a.len(), pairs);
    let mut class_counts = [0usize; 8];
    let mut word_counts = std::collections::HashMap::<String, usize>::new();
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        assert_eq!((x.pair_id, y.pair_id), (Some(i as u64), Some(i as u64)));
        assert_eq!(x.label, y.label);
        let Payload::Text(ids) = &y.payload else { panic!("side b is not text") };
        let text = String::from_utf8(detokenize(ids)).unwrap();
        let words: Vec<&str> = text.split(' ').collect();
        assert_eq!(words.len(), 4, "{text}");
        let label = y.label.unwrap() as usize;
        assert_eq!(words.iter().filter(|w| **w == grammar.class_names[label]).count(), 1, "{text}");
        class_counts[label] += 1;
        for w in words {
            *word_counts.entry(w.to_string()).or_default() += 1;
        }
    }
    assert!(class_counts.iter().all(|&c| c == pairs / 8), "{class_counts:?}");
    // each attribute word is drawn uniformly from its list
    for (list, n) in [(&grammar.places, 4.0), (&grammar.sizes, 2.0), (&grammar.shades, 2.0)] {
        for w in list {
            let got = word_counts[w] as f64;
            let want = pairs as f64 / n;
            assert!((got - want).abs() < 0.1 * want, "{w}: {got} vs {want}");
        }
    }
}

#[test]
fn large_feature_cache_round_trips_through_disk() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cache = FeatureCache::new(Modality::Audio, 16, true);
    for i in 0..10_000u64 {
        let label = (i % 3 != 0).then_some((i % 7) as u32);
        cache.push(i * 3, label, (0..16).map(|_| rng.random_range(-5.0..5.0)).collect()).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.omnf");
    cache.write(&path).unwrap();
    assert_eq!(FeatureCache::read(&path).unwrap(), cache);
}

#[test]
fn balancing_preserves_the_class_mix() {
    let stores =
        Stores::new(corpus(Modality::Image, 512, 1), corpus(Modality::Audio, 256, 1), corpus(Modality::Text, 128, 1)).unwrap();
    let balanced = balance_datasets(&stores, 800, &mut ChaCha8Rng::seed_from_u64(8));
    assert_eq!(balanced.sizes(), [800, 800, 512]);
    for m in [Modality::Image, Modality::Audio] {
        let mut counts = [0usize; 4];
        balanced.get(m).iter().for_each(|s| counts[s.label.unwrap() as usize] += 1);
        assert!(counts.iter().all(|&c| (c as f64 - 200.0).abs() <= 40.0), "{m:?}: {counts:?}");
    }
    assert_eq!(balanced.get(Modality::Text), stores.get(Modality::Text));
}

#[test]
fn probe_on_shuffled_labels_is_at_chance() {
    let enc = OmniEncoder::<f32>::new(EncoderConfig::desk(), 2).unwrap();
    let (train, test) = train_test_split(&corpus(Modality::Image, 64, 2), 0.5, 2);
    // with four classes a single shuffle is a handful of coin flips, so average several
    let runs = 12;
    let mut total = 0.0;
    for r in 0..runs {
        let mut y = labels(&train);
        y.shuffle(&mut ChaCha8Rng::seed_from_u64(r));
        let mut shuffled = train.clone();
        for (s, l) in shuffled.iter_mut().zip(y) {
            s.label = Some(l);
        }
        total += train_linear_probe(&enc, &shuffled, &test, &ProbeConfig::default(), r).unwrap().test_accuracy;
    }
    let mean = total / runs as f64;
    assert!((mean - 0.25).abs() < 0.1, "{mean}");
}

#[test]
fn untrained_alignment_head_retrieves_at_chance() {
    let (n, d, classes) = (1024, 64, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut side = |m| {
        let mut c = FeatureCache::new(m, d, true);
        for i in 0..n as u64 {
            c.push(i, Some((i % classes) as u32), (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        }
        c
    };
    let cache = PairedFeatureCache::new(side(Modality::Image), side(Modality::Text)).unwrap();
    let head = AlignmentHead::new(Modality::Image, Modality::Text, d, 32, 0).unwrap();
    let (ci, ct) = class_retrieval_at_k(&cache, &head, 1).unwrap();
    let chance = 1.0 / classes as f64;
    assert!((ci - chance).abs() < 0.05 && (ct - chance).abs() < 0.05, "{ci} {ct}");
    let (pi, pt) = retrieval_at_k(&cache, &head, 10).unwrap();
    assert!(pi < 0.04 && pt < 0.04, "{pi} {pt}");
}

#[test]
fn separate_heads_only_receive_their_own_gradient() {
    let cfg = EncoderConfig::desk();
    assert_eq!(cfg.head_mode, HeadMode::Separate);
    let enc = OmniEncoder::<f32>::new(cfg.clone(), 0).unwrap();
    let aug = AugmentationConfig::desk(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for m in Modality::ALL {
        let batch = &corpus(m, 2, 0)[..6];
        let v1: Vec<_> = batch.iter().map(|s| augment(s, &aug, &cfg, &mut rng)).collect();
        let v2: Vec<_> = batch.iter().map(|s| augment(s, &aug, &cfg, &mut rng)).collect();
        let tape = Tape::new();
        let b = Bound::new(&tape, &enc.params);
        let loss = contrastive_step_loss(&enc, &b, &v1, &v2, m, 0.05).unwrap();
        let grads = b.collect_grads(&tape.backward(loss).unwrap());
        let own = enc.head_prefix(m);
        let mut own_norm = 0.0;
        for (name, g) in &grads {
            let norm: f64 = g.data().iter().map(|&v| (v as f64).powi(2)).sum();
            if name.starts_with("heads.") && !name.starts_with(&own) {
                assert_eq!(norm, 0.0, "{m:?} leaked into {name}");
            }
            if name.starts_with(&own) {
                own_norm += norm;
            }
        }
        assert!(own_norm > 0.0, "{m:?} head got no gradient");
    }
}

#[test]
fn sbora_finetuning_moves_only_the_adapters() {
    let mut enc = OmniEncoder::<f32>::new(EncoderConfig::desk(), 1).unwrap();
    attach_sbora(&mut enc, &BLOCK_LINEARS, 4, 4.0, 1).unwrap();
    let before = enc.clone();
    let (train, test) = train_test_split(&corpus(Modality::Text, 8, 1), 0.25, 1);
    let cfg = ProbeConfig { optimizer: OptimizerConfig::new(1e-3, 1e-4, 0.1, 1, 2), batch_size: 8 };
    finetune_sbora(&mut enc, &train, &test, &cfg, 1).unwrap();
    assert_eq!(enc.backbone_digest(), before.backbone_digest());
    let mut moved = 0;
    for (name, p) in enc.params.iter() {
        let old = before.params.get(name).unwrap();
        if name.starts_with("sbora.") {
            moved += usize::from(&p.value != old);
        } else {
            assert_eq!(&p.value, old, "{name} changed");
        }
    }
    assert_eq!(moved, enc.adapters.len());
}
