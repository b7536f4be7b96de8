//! Full classifier: embeddings, stacked encoder layers, mean pooling and
//! a softmax head, plus the cross-entropy objective.

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoding::{EncodedInput, Polarity, Segment};
use crate::error::{Error, Result};
use crate::layer::{layer_forward, xavier, AblationMode, AttentionTrace, Dropout, LayerConfig, LayerWeights};
use crate::tensor::{Tape, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub layers: usize,
    pub layer: LayerConfig,
    /// Include `[CLS]`/`[SEP]` rows in mean pooling.
    pub pool_special: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.layer.validate()?;
        if self.layers == 0 {
            return Err(Error::Config("at least one layer is required".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config("vocabulary must hold at least one content token".into()));
        }
        if self.max_len < 4 {
            return Err(Error::Config("max_len must be at least 4".into()));
        }
        Ok(())
    }
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub token_emb: T,
    pub pos_emb: T,
    pub seg_emb: T,
    pub layers: Vec<LayerWeights<T>>,
    pub w_p: T,
    pub b_p: T,
}

pub type ModelParams = ModelWeights<Tensor>;

impl<T> ModelWeights<T> {
    /// Visits tensors in canonical order with dotted names.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        f("token_emb".into(), &self.token_emb);
        f("pos_emb".into(), &self.pos_emb);
        f("seg_emb".into(), &self.seg_emb);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layers.{i}."), f);
        }
        f("w_p".into(), &self.w_p);
        f("b_p".into(), &self.b_p);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut T)) {
        f("token_emb".into(), &mut self.token_emb);
        f("pos_emb".into(), &mut self.pos_emb);
        f("seg_emb".into(), &mut self.seg_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layers.{i}."), f);
        }
        f("w_p".into(), &mut self.w_p);
        f("b_p".into(), &mut self.b_p);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> ModelWeights<U> {
        ModelWeights {
            token_emb: f(&self.token_emb),
            pos_emb: f(&self.pos_emb),
            seg_emb: f(&self.seg_emb),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            w_p: f(&self.w_p),
            b_p: f(&self.b_p),
        }
    }

    /// References in canonical order.
    pub fn flat(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, t| out.push(t));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }

    /// Rebuilds the same structure from values listed in canonical order.
    pub fn rebuild<U: Clone>(&self, values: &[U]) -> Result<ModelWeights<U>> {
        let expected = self.flat().len();
        if values.len() != expected {
            return Err(Error::Contract(format!(
                "expected {expected} tensors, got {}",
                values.len()
            )));
        }
        let mut it = values.iter();
        Ok(self.map(&mut |_| it.next().expect("length checked").clone()))
    }
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.layer.d_model;
        let token_emb = xavier(&[cfg.vocab_size, d], rng);
        let pos_emb = xavier(&[cfg.max_len, d], rng);
        let seg_emb = xavier(&[Segment::COUNT, d], rng);
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights::init(&cfg.layer, rng))
            .collect::<Result<_>>()?;
        Ok(ModelWeights {
            token_emb,
            pos_emb,
            seg_emb,
            layers,
            w_p: xavier(&[d, Polarity::COUNT], rng),
            b_p: Tensor::zeros(&[Polarity::COUNT]),
        })
    }

    pub fn bind(&self, tape: &mut Tape, track: bool) -> ModelWeights<Var> {
        self.map(&mut |t| {
            if track {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    pub fn num_params(&self) -> usize {
        self.flat().iter().map(|t| t.numel()).sum()
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        let fresh = ModelParams::init(cfg, &mut rand::SeedableRng::seed_from_u64(0))?;
        let mut mismatch = None;
        let mine = self.flat();
        if mine.len() != fresh.flat().len() {
            return Err(Error::Checkpoint(format!(
                "parameter count {} does not match config ({})",
                mine.len(),
                fresh.flat().len()
            )));
        }
        for ((name, want), have) in fresh.names().into_iter().zip(fresh.flat()).zip(mine) {
            if want.shape() != have.shape() && mismatch.is_none() {
                mismatch = Some(format!("{name}: {:?} vs expected {:?}", have.shape(), want.shape()));
            }
        }
        match mismatch {
            Some(m) => Err(Error::Checkpoint(format!("shape mismatch at {m}"))),
            None => Ok(()),
        }
    }
}

/// Token + position + segment embedding per position.
pub fn embed(tape: &mut Tape, enc: &EncodedInput, w: &ModelWeights<Var>) -> Result<Var> {
    let n = enc.len();
    if n == 0 {
        return Err(Error::EmptyInput("empty encoded input".into()));
    }
    let max_len = tape.shape(w.pos_emb)[0];
    if n > max_len {
        return Err(Error::Data(format!("input of {n} positions exceeds max_len {max_len}")));
    }
    let tok = tape.gather_rows(w.token_emb, &enc.ids)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = tape.gather_rows(w.pos_emb, &positions)?;
    let seg_ids: Vec<usize> = enc.segments.iter().map(|s| s.id()).collect();
    let seg = tape.gather_rows(w.seg_emb, &seg_ids)?;
    let sum = tape.add(tok, pos)?;
    tape.add(sum, seg)
}

/// Forward pass recorded on a tape.
pub struct TapeForward {
    pub logits: Var,
    pub probs: Var,
    pub traces: Vec<AttentionTrace>,
}

fn pool_mask(enc: &EncodedInput, pool_special: bool) -> Vec<f64> {
    enc.segments
        .iter()
        .map(|s| match s {
            Segment::Pad => 0.0,
            Segment::Sent | Segment::Asp => 1.0,
            _ if pool_special => 1.0,
            _ => 0.0,
        })
        .collect()
}

/// Embed → layers → masked mean pool → affine → softmax.
pub fn forward_on_tape(
    tape: &mut Tape,
    enc: &EncodedInput,
    w: &ModelWeights<Var>,
    cfg: &ModelConfig,
    mode: AblationMode,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<TapeForward> {
    if w.layers.len() != cfg.layers {
        return Err(Error::Config(format!(
            "{} layer weights for {} layers",
            w.layers.len(),
            cfg.layers
        )));
    }
    let mut h = embed(tape, enc, w)?;
    let mut traces = Vec::with_capacity(cfg.layers);
    for lw in &w.layers {
        let (out, trace) = layer_forward(tape, h, enc, lw, &cfg.layer, mode, dropout)?;
        h = out;
        traces.push(trace);
    }
    let pooled = tape.mean_rows(h, &pool_mask(enc, cfg.pool_special))?;
    let pooled = tape.reshape(pooled, vec![1, cfg.layer.d_model])?;
    let logits = tape.matmul(pooled, w.w_p)?;
    let logits = tape.add_bias(logits, w.b_p)?;
    let probs = tape.softmax_rows(logits);
    Ok(TapeForward { logits, probs, traces })
}

/// Class distribution for one input, with per-layer traces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub predicted: Polarity,
    pub traces: Vec<AttentionTrace>,
}

impl Prediction {
    pub fn from_probs(probs: Vec<f64>, traces: Vec<AttentionTrace>) -> Self {
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        Prediction {
            predicted: Polarity::from_id(best).expect("three classes"),
            probs,
            traces,
        }
    }

    /// `-ln p[gold]` with the probability clamped at [`crate::tensor::PROB_CLAMP`].
    pub fn loss(&self, gold: Polarity) -> LossValue {
        let p = self.probs[gold.id()];
        LossValue {
            value: -p.max(crate::tensor::PROB_CLAMP).ln(),
            clamped: p < crate::tensor::PROB_CLAMP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// The gold probability underflowed and was clamped before the log.
    pub clamped: bool,
}

/// Deterministic forward pass (dropout off).
pub fn forward(enc: &EncodedInput, params: &ModelParams, cfg: &ModelConfig, mode: AblationMode) -> Result<Prediction> {
    forward_with(enc, params, cfg, mode, &mut None)
}

/// Forward pass; dropout is active iff `dropout` is `Some`.
pub fn forward_with(
    enc: &EncodedInput,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: AblationMode,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<Prediction> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false);
    let out = forward_on_tape(&mut tape, enc, &w, cfg, mode, dropout)?;
    let probs = tape.value(out.probs).data().to_vec();
    Ok(Prediction::from_probs(probs, out.traces))
}

/// Cross-entropy of the gold class on a recorded forward pass.
pub fn loss(tape: &mut Tape, out: &TapeForward, gold: Polarity) -> Result<Var> {
    tape.nll(out.probs, gold.id())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::{build_vocab, encode, Example};
    use rand::SeedableRng;

    pub(crate) fn small_cfg(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            max_len: 16,
            layers: 2,
            layer: LayerConfig {
                d_model: 8,
                heads: 2,
                d_ff: 16,
                gate_width: 3,
                ln_eps: 1e-5,
                double_ln: true,
            },
            pool_special: true,
        }
    }

    fn setup() -> (ModelConfig, ModelParams, EncodedInput) {
        let ex = Example::from_text("the tasty food was great", "food", Polarity::Positive).unwrap();
        let vocab = build_vocab(std::slice::from_ref(&ex), 1).unwrap();
        let cfg = small_cfg(vocab.len());
        let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let enc = encode(&ex, &vocab, 12).unwrap();
        (cfg, params, enc)
    }

    #[test]
    fn probs_form_distribution() {
        let (cfg, params, enc) = setup();
        let pred = forward(&enc, &params, &cfg, AblationMode::Full).unwrap();
        assert!((pred.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(pred.traces.len(), 2);
        assert_eq!(pred, forward(&enc, &params, &cfg, AblationMode::Full).unwrap());
    }

    #[test]
    fn zero_classifier_gives_uniform() {
        let (cfg, mut params, enc) = setup();
        params.w_p = Tensor::zeros(&[8, 3]);
        let pred = forward(&enc, &params, &cfg, AblationMode::Full).unwrap();
        for p in &pred.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((pred.loss(Polarity::Neutral).value - 3f64.ln()).abs() < 1e-12);
        assert_eq!(pred.predicted, Polarity::Positive);
    }

    #[test]
    fn argmax_ties_pick_lowest_id() {
        let p = Prediction::from_probs(vec![0.2, 0.4, 0.4], vec![]);
        assert_eq!(p.predicted, Polarity::Negative);
        let p = Prediction::from_probs(vec![1.0, 0.0, 0.0], vec![]);
        assert_eq!(p.predicted, Polarity::Positive);
        assert!(p.loss(Polarity::Positive).value.abs() < 1e-15);
        assert!(p.loss(Polarity::Neutral).clamped);
    }

    #[test]
    fn zero_embeddings_embed_to_zero() {
        let (_, mut params, enc) = setup();
        params.token_emb = Tensor::zeros(params.token_emb.shape());
        params.pos_emb = Tensor::zeros(params.pos_emb.shape());
        params.seg_emb = Tensor::zeros(params.seg_emb.shape());
        let mut tape = Tape::new();
        let w = params.bind(&mut tape, false);
        let h = embed(&mut tape, &enc, &w).unwrap();
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_is_local() {
        let (_, params, enc) = setup();
        let mut other = enc.clone();
        other.ids[2] = 4;
        let mut tape = Tape::new();
        let w = params.bind(&mut tape, false);
        let a = embed(&mut tape, &enc, &w).unwrap();
        let b = embed(&mut tape, &other, &w).unwrap();
        let (a, b) = (tape.value(a), tape.value(b));
        for r in 0..enc.len() {
            assert_eq!(a.row(r) == b.row(r), r != 2, "row {r}");
        }
    }

    #[test]
    fn out_of_range_id_is_data_error() {
        let (cfg, params, mut enc) = setup();
        enc.ids[1] = cfg.vocab_size;
        assert!(matches!(
            forward(&enc, &params, &cfg, AblationMode::Full),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn rebuild_round_trips_structure() {
        let (_, params, _) = setup();
        let flat: Vec<Tensor> = params.flat().into_iter().cloned().collect();
        assert_eq!(params.rebuild(&flat).unwrap(), params);
        assert!(params.rebuild(&flat[1..]).is_err());
        assert_eq!(params.names().len(), flat.len());
        assert!(params.names().contains(&"layers.1.heads.0.gate_a_kernel".to_string()));
    }
}
