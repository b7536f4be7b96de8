#![allow(dead_code)]

use a3sn::encoding::{build_vocab, encode, EncodedInput, Example, Polarity, Vocabulary};
use a3sn::layer::LayerConfig;
use a3sn::model::{ModelConfig, ModelParams};
use a3sn::tensor::LN_EPS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: [&str; 12] = [
    "the", "food", "waiter", "was", "great", "rude", "battery", "screen", "and", "but", "slow", "fine",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_example(rng: &mut ChaCha8Rng) -> Example {
    let word = |rng: &mut ChaCha8Rng| WORDS[rng.gen_range(0..WORDS.len())].to_string();
    let n = rng.gen_range(0..10);
    let m = rng.gen_range(1..4);
    Example {
        sentence: (0..n).map(|_| word(rng)).collect(),
        aspect: (0..m).map(|_| word(rng)).collect(),
        label: Polarity::from_id(rng.gen_range(0..3)).unwrap(),
    }
}

pub fn word_vocab() -> Vocabulary {
    let ex = Example {
        sentence: WORDS.iter().map(|w| w.to_string()).collect(),
        aspect: vec!["food".into()],
        label: Polarity::Neutral,
    };
    build_vocab(&[ex], 1).unwrap()
}

/// Encoded input with a random amount of PAD tail (possibly none).
pub fn random_encoded(rng: &mut ChaCha8Rng, vocab: &Vocabulary, max_len: usize) -> EncodedInput {
    let ex = random_example(rng);
    let need = ex.sentence.len() + ex.aspect.len() + 3;
    let len = (need + rng.gen_range(0..4)).min(max_len);
    encode(&ex, vocab, len).unwrap()
}

pub fn model_config(vocab_size: usize, max_len: usize, d_model: usize, heads: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        max_len,
        layers,
        layer: LayerConfig {
            d_model,
            heads,
            d_ff: 2 * d_model,
            gate_width: 3,
            ln_eps: LN_EPS,
            double_ln: true,
        },
        pool_special: true,
    }
}

/// Initialised parameters with every entry nudged, so biases and LN affine terms are nonzero.
pub fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut r = rng(seed);
    let mut p = ModelParams::init(cfg, &mut r).unwrap();
    for t in p.flat_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    p
}

pub fn checksum(p: &ModelParams) -> Vec<u64> {
    p.flat()
        .iter()
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .collect()
}
