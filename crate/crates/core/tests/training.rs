mod common;

use std::time::Instant;

use segtrans_core::augment::{fit_unsupervised, weighted_examples, Origin, UnsupSegmenter, WeightedExample};
use segtrans_core::data::{build_vocabulary, SegmentedSentence, Vocabulary, DELIM, EOS};
use segtrans_core::decode::{beam_search, DecodeConfig};
use segtrans_core::eval::f1_score;
use segtrans_core::model::{CharLM, ModelConfig, SegModel, Trainable};
use segtrans_core::train::{dataset_loss, fine_tune, train, validation_cost, Checkpoint, TrainConfig, TrainError, ValidationRecord};

fn small_model() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        hidden_dim: 32,
        dropout_state: 0.0,
        ..ModelConfig::default()
    }
}

fn fast_train(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size_tokens: 256,
        max_epochs: 80,
        patience: 8,
        seed,
        ..TrainConfig::default()
    }
}

fn segment_all(m: &SegModel, vocab: &Vocabulary, corpus: &[SegmentedSentence]) -> Vec<SegmentedSentence> {
    corpus
        .iter()
        .map(|s| {
            let (ids, _) = vocab.encode(s.chars());
            let d = beam_search(&[m], None, &ids, &DecodeConfig::default()).unwrap();
            SegmentedSentence::new(s.chars().to_vec(), d.boundaries).unwrap()
        })
        .collect()
}

/// Step-0 records carry a NaN training cost, so compare the rendered lines.
fn render(h: &[ValidationRecord]) -> Vec<String> {
    h.iter().map(|r| format!("{r} {:?}", r.train_cost.to_bits())).collect()
}

fn toy_data(n: usize, seed: u64) -> (Vec<SegmentedSentence>, Vocabulary, Vec<WeightedExample>) {
    let lex = common::lexicon(30, seed);
    let corpus = common::corpus(n, &lex, false, seed + 1);
    let vocab = build_vocabulary(&corpus).unwrap();
    let data = weighted_examples(&corpus, &vocab, 1.0, Origin::Gold);
    (corpus, vocab, data)
}

#[test]
fn overfits_fifty_sentences() {
    let (corpus, vocab, data) = toy_data(50, 3);
    let mut model = SegModel::new(small_model(), vocab.len(), 1).unwrap();
    let t0 = Instant::now();
    let cfg = TrainConfig { max_epochs: 200, ..fast_train(1) };
    let report = train(&mut model, &data, &data, &cfg, &mut |_| {}).unwrap();
    let f1 = f1_score(&segment_all(&model, &vocab, &corpus), &corpus).unwrap().f1;
    println!(
        "overfit: {} epochs, valid cost {:.4}, F1 {:.4}, {:.1}s",
        report.epochs,
        report.best_valid_cost,
        f1,
        t0.elapsed().as_secs_f64()
    );
    assert!(f1 >= 0.99, "train F1 {f1}");
    assert!(report.best_valid_cost <= 0.1, "valid cost {}", report.best_valid_cost);
}

#[test]
fn same_seed_same_trajectory() {
    let (_, vocab, data) = toy_data(30, 5);
    let cfg = TrainConfig {
        max_epochs: 3,
        ..fast_train(9)
    };
    let mdl = ModelConfig {
        dropout_state: 0.2,
        dropout_src: 0.1,
        label_smoothing: 0.1,
        ..small_model()
    };
    let run = || {
        let mut m = SegModel::new(mdl.clone(), vocab.len(), 4).unwrap();
        let r = train(&mut m, &data, &data[..10], &cfg, &mut |_| {}).unwrap();
        (m.params().clone(), r)
    };
    let (pa, ra) = run();
    let (pb, rb) = run();
    assert_eq!(pa, pb);
    assert_eq!(render(&ra.history), render(&rb.history));
    assert_eq!(ra.moments, rb.moments);
}

#[test]
fn returns_minimum_validation_checkpoint() {
    let (_, vocab, data) = toy_data(30, 6);
    let mut m = SegModel::new(small_model(), vocab.len(), 2).unwrap();
    let cfg = TrainConfig {
        // large steps make the validation curve bounce
        learning_rate: 0.05,
        max_epochs: 12,
        patience: 4,
        ..fast_train(2)
    };
    let (train_set, valid) = data.split_at(22);
    let mut lines = Vec::new();
    let r = train(&mut m, train_set, valid, &cfg, &mut |rec| lines.push(rec.to_string())).unwrap();
    let min = r.history.iter().map(|h| h.valid_cost).fold(f64::INFINITY, f64::min);
    assert_eq!(r.best_valid_cost, min);
    assert_eq!(validation_cost(&m, valid, cfg.batch_size_tokens).unwrap(), min);
    assert_eq!(lines.len(), r.history.len());
    assert!(lines[0].starts_with("step=0 epoch=0"));
}

#[test]
fn non_finite_parameters_abort() {
    let (_, vocab, data) = toy_data(10, 7);
    let mut m = SegModel::new(small_model(), vocab.len(), 2).unwrap();
    m.params_mut().tensors_mut()[0].data_mut()[0] = f64::NAN;
    let err = train(&mut m, &data, &data, &fast_train(1), &mut |_| {}).unwrap_err();
    assert!(matches!(err, TrainError::NonFiniteLoss { .. }), "{err}");
}

#[test]
fn duplicating_equals_weighting() {
    let (corpus, vocab, _) = toy_data(12, 8);
    let m = SegModel::new(small_model(), vocab.len(), 3).unwrap();
    let k = 5;
    let mut dup = weighted_examples(&corpus[1..], &vocab, 1.0, Origin::Gold);
    let mut once = dup.clone();
    for _ in 0..k {
        dup.push(WeightedExample::new(&corpus[0], &vocab, 1.0, Origin::Gold));
    }
    once.push(WeightedExample::new(&corpus[0], &vocab, k as f64, Origin::Gold));
    let a = dataset_loss(&m, &dup, 2.0, 10_000).unwrap();
    let b = dataset_loss(&m, &once, 2.0, 10_000).unwrap();
    assert!((a - b).abs() <= 1e-12 * a.abs(), "{a} vs {b}");
}

#[test]
fn fine_tune_rules() {
    let (corpus, vocab, data) = toy_data(40, 10);
    let (train_set, valid) = data.split_at(32);
    let mdl = small_model();
    let cfg = fast_train(3);

    // from a random start, fine-tuning is plain training
    let init = SegModel::new(mdl.clone(), vocab.len(), 5).unwrap();
    let ck = Checkpoint::from_segmenter(&init, &vocab, None, 5, false);
    let short = TrainConfig { max_epochs: 3, ..cfg.clone() };
    let (ft, ft_report) = fine_tune(&ck, &vocab, &mdl, train_set, valid, &short, &mut |_| {}).unwrap();
    let mut direct = init.clone();
    let direct_report = train(&mut direct, train_set, valid, &short, &mut |_| {}).unwrap();
    assert_eq!(ft.params(), direct.params());
    assert_eq!(render(&ft_report.history), render(&direct_report.history));

    // from a converged start, it stops quickly without getting worse
    let mut m = init.clone();
    let r = train(&mut m, train_set, valid, &cfg, &mut |_| {}).unwrap();
    let ck = Checkpoint::from_segmenter(&m, &vocab, Some(&r), 3, true);
    let (_, again) = fine_tune(&ck, &vocab, &mdl, train_set, valid, &cfg, &mut |_| {}).unwrap();
    assert!(again.best_valid_cost <= r.best_valid_cost + 1e-3);
    assert!(again.epochs <= cfg.patience + 1, "{} epochs", again.epochs);

    // mismatches
    let other = build_vocabulary(&corpus[..3]).unwrap();
    assert_eq!(
        fine_tune(&ck, &other, &mdl, train_set, valid, &cfg, &mut |_| {}).unwrap_err(),
        TrainError::VocabularyMismatch
    );
    let bigger = ModelConfig { hidden_dim: 8, ..mdl.clone() };
    assert_eq!(
        fine_tune(&ck, &vocab, &bigger, train_set, valid, &cfg, &mut |_| {}).unwrap_err(),
        TrainError::ConfigMismatch
    );
}

#[test]
fn transfer_pipeline_runs() {
    let (corpus, vocab, gold) = toy_data(60, 12);
    let (gold_train, valid) = gold.split_at(48);
    let raw: Vec<_> = corpus[..48].iter().map(|s| s.chars().to_vec()).collect();
    let unsup = fit_unsupervised(&raw, 3).unwrap();
    let auto: Vec<SegmentedSentence> = raw.iter().map(|r| unsup.segment_sentence(r)).collect();
    let augmented = weighted_examples(&auto, &vocab, 1.0, Origin::Unsupervised);
    let mdl = small_model();
    let cfg = TrainConfig { max_epochs: 15, ..fast_train(4) };

    let mut m = SegModel::new(mdl.clone(), vocab.len(), 6).unwrap();
    let aug_report = train(&mut m, &augmented, valid, &cfg, &mut |_| {}).unwrap();
    let ck = Checkpoint::from_segmenter(&m, &vocab, Some(&aug_report), 4, false);
    let (_, ft) = fine_tune(&ck, &vocab, &mdl, gold_train, valid, &cfg, &mut |_| {}).unwrap();
    assert!(ft.best_valid_cost <= aug_report.best_valid_cost);
}

#[test]
fn lm_memorizes_a_deterministic_corpus() {
    // vocabulary: reserved ids, then a = 7, b = 8
    let seq = WeightedExample {
        source: vec![7, 8],
        target: vec![7, DELIM, 8, EOS],
        weight: 1.0,
        origin: Origin::Gold,
    };
    let data = vec![seq; 4];
    let mut lm = CharLM::new(small_model(), 9, 1).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        max_epochs: 300,
        patience: 20,
        ..TrainConfig::default()
    };
    let r = train(&mut lm, &data, &data[..1], &cfg, &mut |_| {}).unwrap();
    let perplexity = r.best_valid_cost.exp();
    assert!(perplexity <= 1.05, "perplexity {perplexity}");
}
