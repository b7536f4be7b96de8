mod common;

use a3sn::checkpoint::Checkpoint;
use a3sn::diagnostics::{check_model_loss, check_ops};
use a3sn::encoding::{build_vocab, encode, synth_dataset, Example, Polarity, Segment, UNK_ID};
use a3sn::layer::AblationMode;
use a3sn::model::forward;
use a3sn::tensor::{matmul_raw, Tape, Tensor, DEFAULT_FD_EPS};
use a3sn::training::{evaluate, train_step, AdamConfig, AdamState, Metrics};
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn every_op_gradchecks_over_100_seeds() {
    for seed in 0..100 {
        for c in check_ops(seed, DEFAULT_FD_EPS, 1e-4).unwrap() {
            assert!(c.passed, "seed {seed}: {c:?}");
        }
    }
}

#[test]
fn model_loss_gradchecks_in_every_mode() {
    for seed in 0..8 {
        let mode = AblationMode::ALL[seed as usize % 4];
        let c = check_model_loss(seed, 8, 2, mode, DEFAULT_FD_EPS, 1e-4).unwrap();
        assert!(c.passed, "{c:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, l in 1usize..5, n in 1usize..5) {
        let mut r = rng(seed);
        let (a, b, c) = (tensor(&mut r, &[m, k]), tensor(&mut r, &[k, l]), tensor(&mut r, &[l, n]));
        let ab = matmul_raw(a.data(), b.data(), m, k, l);
        let left = matmul_raw(&ab, c.data(), m, l, n);
        let bc = matmul_raw(b.data(), c.data(), k, l, n);
        let right = matmul_raw(a.data(), &bc, m, k, n);
        for (x, y) in left.iter().zip(&right) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..8, spread in 0.0f64..800.0) {
        let mut r = rng(seed);
        let data = (0..rows * cols).map(|_| r.gen_range(-spread - 1.0..spread + 1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let s = tape.softmax_rows(x);
        let out = tape.value(s);
        for i in 0..rows {
            let row = out.row(i);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_preserves_length(seed in any::<u64>(), n in 1usize..12, d_in in 1usize..5, d_out in 1usize..5) {
        let mut r = rng(seed);
        let mut tape = Tape::new();
        let x = tape.constant(tensor(&mut r, &[n, d_in]));
        let k = tape.constant(tensor(&mut r, &[3, d_in, d_out]));
        let b = tape.constant(tensor(&mut r, &[d_out]));
        let y = tape.conv1d_same(x, k, b).unwrap();
        prop_assert_eq!(tape.shape(y), &[n, d_out][..]);
    }

    #[test]
    fn encodings_follow_the_layout(seed in any::<u64>(), slack in 0usize..6) {
        let mut r = rng(seed);
        let vocab = word_vocab();
        let ex = random_example(&mut r);
        let max_len = (ex.aspect.len() + 3 + r.gen_range(0..12)).max(4) + slack;
        let enc = encode(&ex, &vocab, max_len).unwrap();
        prop_assert_eq!(enc.len(), max_len);
        prop_assert!(enc.validate().is_ok());
        let asp: Vec<usize> = enc.segments.iter().enumerate().filter(|(_, &s)| s == Segment::Asp).map(|(i, _)| enc.ids[i]).collect();
        let want: Vec<usize> = ex.aspect.iter().map(|t| vocab.id(t)).collect();
        prop_assert_eq!(asp, want);
        let sent = enc.segments.iter().filter(|&&s| s == Segment::Sent).count();
        prop_assert_eq!(sent, ex.sentence.len().min(max_len - ex.aspect.len() - 3));
        for (i, &s) in enc.segments.iter().enumerate() {
            prop_assert_eq!(enc.pad_mask[i] == 0, s == Segment::Pad);
        }
    }

    #[test]
    fn padding_never_changes_predictions(seed in any::<u64>(), extra in 1usize..8) {
        let mut r = rng(seed);
        let vocab = word_vocab();
        let cfg = model_config(vocab.len(), 24, 8, 2, 1);
        let ex = random_example(&mut r);
        let base = encode(&ex, &vocab, ex.sentence.len() + ex.aspect.len() + 3).unwrap();
        let padded = base.resized((base.len() + extra).min(24)).unwrap();
        let params = random_params(&cfg, seed);
        let a = forward(&base, &params, &cfg, AblationMode::Full).unwrap();
        let b = forward(&padded, &params, &cfg, AblationMode::Full).unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let mut r = rng(seed);
        let vocab = word_vocab();
        let cfg = model_config(vocab.len(), 24, 8, 2, 1);
        let enc = random_encoded(&mut r, &vocab, 24);
        let params = random_params(&cfg, seed);
        let a = forward(&enc, &params, &cfg, AblationMode::NoGatedFusion).unwrap();
        let b = forward(&enc, &params, &cfg, AblationMode::NoGatedFusion).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn metrics_match_a_recount(labels in proptest::collection::vec((0usize..3, 0usize..3), 1..60)) {
        let gold: Vec<Polarity> = labels.iter().map(|&(g, _)| Polarity::from_id(g).unwrap()).collect();
        let pred: Vec<Polarity> = labels.iter().map(|&(_, p)| Polarity::from_id(p).unwrap()).collect();
        let m = Metrics::from_predictions(&gold, &pred, 0.0).unwrap();
        let correct = labels.iter().filter(|(g, p)| g == p).count();
        prop_assert!((m.accuracy - correct as f64 / labels.len() as f64).abs() < 1e-15);
        let mut f1 = 0.0;
        for c in 0..3 {
            let tp = labels.iter().filter(|&&(g, p)| g == c && p == c).count() as f64;
            let fp = labels.iter().filter(|&&(g, p)| g != c && p == c).count() as f64;
            let fn_ = labels.iter().filter(|&&(g, p)| g == c && p != c).count() as f64;
            let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rec = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            f1 += if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        }
        prop_assert!((m.macro_f1 - f1 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn unknown_words_map_to_unk() {
    let vocab = word_vocab();
    let ex = Example::from_text("the zebra", "food", Polarity::Positive).unwrap();
    let enc = encode(&ex, &vocab, 8).unwrap();
    assert_eq!(enc.ids[2], UNK_ID);
}

#[test]
fn one_small_step_lowers_the_loss() {
    let adam = AdamConfig {
        lr: 1e-4,
        ..AdamConfig::default()
    };
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let vocab = word_vocab();
        let cfg = model_config(vocab.len(), 24, 8, 2, 1);
        let mut enc = random_encoded(&mut r, &vocab, 24);
        enc.label = Polarity::from_id(seed as usize % 3).unwrap();
        let mut params = random_params(&cfg, seed);
        let before = forward(&enc, &params, &cfg, AblationMode::Full)
            .unwrap()
            .loss(enc.label)
            .value;
        let mut state = AdamState::new(params.flat());
        train_step(&mut params, &mut state, &cfg, &adam, &[&enc], AblationMode::Full, None).unwrap();
        let after = forward(&enc, &params, &cfg, AblationMode::Full)
            .unwrap()
            .loss(enc.label)
            .value;
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn evaluate_leaves_parameters_untouched() {
    let data = synth_dataset(30, 2, 10).unwrap();
    let vocab = build_vocab(&data, 1).unwrap();
    let config = model_config(vocab.len(), 24, 8, 2, 1);
    let ckpt = Checkpoint {
        config,
        vocab,
        params: random_params(&config, 5),
        meta: String::new(),
    };
    let before = checksum(&ckpt.params);
    let m1 = evaluate(&data, &ckpt, AblationMode::Full).unwrap();
    let m2 = evaluate(&data, &ckpt, AblationMode::Full).unwrap();
    assert_eq!(before, checksum(&ckpt.params));
    assert_eq!(m1, m2);
}
