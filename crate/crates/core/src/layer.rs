//! One encoder layer: masked multi-head attention, the amplified
//! sentence↔aspect path, CNN-gated fusion of the two, head projection,
//! residual layer norms and the feed-forward block.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::EncodedInput;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Additive mask value on padded key positions.
pub const MASK_NEG: f64 = -1e9;

/// Which branches of the fusion are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    #[default]
    Full,
    /// Original head and its gate replaced by the amplified ones.
    NoOriginal,
    /// Amplified head and its gate replaced by the original ones.
    NoAmplified,
    /// Heads merged by a trained affine map instead of gates.
    NoGatedFusion,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Full,
        AblationMode::NoOriginal,
        AblationMode::NoAmplified,
        AblationMode::NoGatedFusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoOriginal => "no-original",
            AblationMode::NoAmplified => "no-amplified",
            AblationMode::NoGatedFusion => "no-gated-fusion",
        }
    }

    /// Row label used in ablation reports.
    pub fn report_label(self) -> &'static str {
        match self {
            AblationMode::Full => "A3SN",
            AblationMode::NoOriginal => "A3SN w/o original attention",
            AblationMode::NoAmplified => "A3SN w/o amplified attention",
            AblationMode::NoGatedFusion => "A3SN w/o gated fusion",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

/// Shape-level settings shared by every layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub gate_width: usize,
    pub ln_eps: f64,
    /// `LN(LN(h) + MultiHead)` when true, `LN(h + MultiHead)` otherwise.
    pub double_ln: bool,
}

impl LayerConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("d_ff must be positive".into()));
        }
        if self.gate_width.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "gate width must be odd, got {}",
                self.gate_width
            )));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-head weights. `T` is [`Tensor`] for storage and [`Var`] on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights<T> {
    pub w_q: T,
    pub w_k: T,
    pub w_v: T,
    pub gate_o_kernel: T,
    pub gate_o_bias: T,
    pub gate_a_kernel: T,
    pub gate_a_bias: T,
    /// Affine merge used only by [`AblationMode::NoGatedFusion`].
    pub fuse_w: T,
    pub fuse_b: T,
}

/// Weights of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub heads: Vec<HeadWeights<T>>,
    pub w_h: T,
    pub ffn_w1: T,
    pub ffn_b1: T,
    pub ffn_w2: T,
    pub ffn_b2: T,
    pub ln_attn_gamma: T,
    pub ln_attn_beta: T,
    pub ln_mid_gamma: T,
    pub ln_mid_beta: T,
    pub ln_out_gamma: T,
    pub ln_out_beta: T,
}

pub type LayerParams = LayerWeights<Tensor>;

macro_rules! visit_fields {
    ($self:ident, $prefix:ident, $f:ident; $($field:ident),*) => {
        $( $f(format!("{}{}", $prefix, stringify!($field)), &$self.$field); )*
    };
}

macro_rules! visit_fields_mut {
    ($self:ident, $prefix:ident, $f:ident; $($field:ident),*) => {
        $( $f(format!("{}{}", $prefix, stringify!($field)), &mut $self.$field); )*
    };
}

macro_rules! map_fields {
    ($self:ident, $f:ident, $ty:ident { $($field:ident),* } $(, $extra:ident: $val:expr)*) => {
        $ty { $( $field: $f(&$self.$field), )* $( $extra: $val, )* }
    };
}

impl<T> HeadWeights<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        visit_fields!(self, prefix, f; w_q, w_k, w_v, gate_o_kernel, gate_o_bias,
            gate_a_kernel, gate_a_bias, fuse_w, fuse_b);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        visit_fields_mut!(self, prefix, f; w_q, w_k, w_v, gate_o_kernel, gate_o_bias,
            gate_a_kernel, gate_a_bias, fuse_w, fuse_b);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> HeadWeights<U> {
        map_fields!(
            self,
            f,
            HeadWeights {
                w_q,
                w_k,
                w_v,
                gate_o_kernel,
                gate_o_bias,
                gate_a_kernel,
                gate_a_bias,
                fuse_w,
                fuse_b
            }
        )
    }
}

impl<T> LayerWeights<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&format!("{prefix}heads.{i}."), f);
        }
        visit_fields!(self, prefix, f; w_h, ffn_w1, ffn_b1, ffn_w2, ffn_b2, ln_attn_gamma,
            ln_attn_beta, ln_mid_gamma, ln_mid_beta, ln_out_gamma, ln_out_beta);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&format!("{prefix}heads.{i}."), f);
        }
        visit_fields_mut!(self, prefix, f; w_h, ffn_w1, ffn_b1, ffn_w2, ffn_b2, ln_attn_gamma,
            ln_attn_beta, ln_mid_gamma, ln_mid_beta, ln_out_gamma, ln_out_beta);
    }

    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> LayerWeights<U> {
        let heads = self.heads.iter().map(|h| h.map(f)).collect();
        map_fields!(self, f, LayerWeights { w_h, ffn_w1, ffn_b1, ffn_w2, ffn_b2, ln_attn_gamma,
            ln_attn_beta, ln_mid_gamma, ln_mid_beta, ln_out_gamma, ln_out_beta }, heads: heads)
    }
}

/// Glorot-uniform tensor; fans are taken from the first and last axes
/// (times the kernel width for rank-3 tensors).
pub fn xavier(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let (fan_in, fan_out) = match *shape {
        [a, b] => (a, b),
        [w, i, o] => (w * i, w * o),
        _ => (shape[0], shape[0]),
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

impl LayerParams {
    pub fn init(cfg: &LayerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, dk, w) = (cfg.d_model, cfg.d_k(), cfg.gate_width);
        let heads = (0..cfg.heads)
            .map(|_| HeadWeights {
                w_q: xavier(&[d, dk], rng),
                w_k: xavier(&[d, dk], rng),
                w_v: xavier(&[d, dk], rng),
                gate_o_kernel: xavier(&[w, dk, dk], rng),
                gate_o_bias: Tensor::zeros(&[dk]),
                gate_a_kernel: xavier(&[w, dk, dk], rng),
                gate_a_bias: Tensor::zeros(&[dk]),
                fuse_w: xavier(&[2 * dk, dk], rng),
                fuse_b: Tensor::zeros(&[dk]),
            })
            .collect();
        Ok(LayerWeights {
            heads,
            w_h: xavier(&[d, d], rng),
            ffn_w1: xavier(&[d, cfg.d_ff], rng),
            ffn_b1: Tensor::zeros(&[cfg.d_ff]),
            ffn_w2: xavier(&[cfg.d_ff, d], rng),
            ffn_b2: Tensor::zeros(&[d]),
            ln_attn_gamma: Tensor::ones(&[d]),
            ln_attn_beta: Tensor::zeros(&[d]),
            ln_mid_gamma: Tensor::ones(&[d]),
            ln_mid_beta: Tensor::zeros(&[d]),
            ln_out_gamma: Tensor::ones(&[d]),
            ln_out_beta: Tensor::zeros(&[d]),
        })
    }

    /// Records every tensor on `tape`, as params when `track` is set.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> LayerWeights<Var> {
        self.map(&mut |t| {
            if track {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }
}

/// Dropout driven by a caller-owned RNG stream; `p == 0` disables it.
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.p);
        let shape = tape.shape(x).to_vec();
        let numel = shape.iter().product();
        let mask = (0..numel)
            .map(|_| if self.rng.gen::<f64>() < self.p { 0.0 } else { keep })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, mask)
    }
}

fn maybe_dropout(tape: &mut Tape, x: Var, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

/// Intermediate record of one head.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadTrace {
    #[serde(serialize_with = "ser_rows")]
    pub score_ori: Tensor,
    #[serde(serialize_with = "ser_rows")]
    pub score_amp: Tensor,
    #[serde(serialize_with = "ser_rows")]
    pub gate_o: Tensor,
    #[serde(serialize_with = "ser_rows")]
    pub gate_a: Tensor,
}

/// Per-head attention scores and gate maps of one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionTrace {
    pub heads: Vec<HeadTrace>,
}

fn ser_rows<S: serde::Serializer>(t: &Tensor, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(t.rows()))?;
    for r in 0..t.rows() {
        seq.serialize_element(t.row(r))?;
    }
    seq.end()
}

/// Sum of the attention mass a score matrix places on sentence↔aspect cells.
pub fn cross_mass(scores: &Tensor, amplify: &Tensor) -> f64 {
    scores
        .data()
        .iter()
        .zip(amplify.data())
        .filter(|(_, &g)| g == 2.0)
        .map(|(s, _)| s)
        .sum()
}

/// Per-head attention probabilities and values.
pub struct HeadScores {
    pub scores: Var,
    pub values: Var,
}

/// Output of [`attention_scores`]: the pre-attention layer norm and per-head scores.
pub struct AttentionScores {
    pub normed: Var,
    pub heads: Vec<HeadScores>,
}

/// Additive key mask: 0 on real keys, [`MASK_NEG`] on padded keys.
pub fn key_mask(pad_mask: &[u8]) -> Tensor {
    let n = pad_mask.len();
    let row: Vec<f64> = pad_mask.iter().map(|&m| if m != 0 { 0.0 } else { MASK_NEG }).collect();
    Tensor::new(vec![n, n], row.repeat(n)).expect("square")
}

/// `softmax(Q·Kᵀ/√d_k + Mask)` per head, with Q, K, V taken from `LN(h)`.
pub fn attention_scores(
    tape: &mut Tape,
    h: Var,
    w: &LayerWeights<Var>,
    cfg: &LayerConfig,
    pad_mask: &[u8],
) -> Result<AttentionScores> {
    let n = tape.shape(h)[0];
    if n == 0 || pad_mask.is_empty() {
        return Err(Error::EmptyInput("attention over zero positions".into()));
    }
    if pad_mask.len() != n {
        return Err(Error::dim("attention_scores", tape.shape(h), &[pad_mask.len()]));
    }
    let normed = tape.layer_norm(h, w.ln_attn_gamma, w.ln_attn_beta, cfg.ln_eps)?;
    let mask = pad_mask.contains(&0).then(|| tape.constant(key_mask(pad_mask)));
    let inv_sqrt = 1.0 / (cfg.d_k() as f64).sqrt();

    let mut heads = Vec::with_capacity(w.heads.len());
    for hw in &w.heads {
        let q = tape.matmul(normed, hw.w_q)?;
        let k = tape.matmul(normed, hw.w_k)?;
        let v = tape.matmul(normed, hw.w_v)?;
        let kt = tape.transpose(k)?;
        let logits = tape.matmul(q, kt)?;
        let mut logits = tape.scale(logits, inv_sqrt);
        if let Some(m) = mask {
            logits = tape.add(logits, m)?;
        }
        let scores = tape.softmax_rows(logits);
        heads.push(HeadScores { scores, values: v });
    }
    Ok(AttentionScores { normed, heads })
}

/// `score_amp = score_ori ⊙ amplify` (no renormalization) and `head_amp = score_amp · V`.
pub fn amplified_attention(tape: &mut Tape, scores: Var, amplify: Var, values: Var) -> Result<(Var, Var)> {
    if tape.shape(scores) != tape.shape(amplify) {
        return Err(Error::dim(
            "amplified_attention",
            tape.shape(scores),
            tape.shape(amplify),
        ));
    }
    let score_amp = tape.mul(scores, amplify)?;
    let head_amp = tape.matmul(score_amp, values)?;
    Ok((head_amp, score_amp))
}

/// `first·g_first + (1 − g_first)·g_second·second`, all elementwise.
pub fn fuse(tape: &mut Tape, first: Var, gate_first: Var, second: Var, gate_second: Var) -> Result<Var> {
    let a = tape.mul(gate_first, first)?;
    let rest = tape.rsub_scalar(1.0, gate_first);
    let b = tape.mul(rest, gate_second)?;
    let b = tape.mul(b, second)?;
    tape.add(a, b)
}

/// `σ(CNN(x))` with padded rows zeroed before the convolution.
pub fn gate(tape: &mut Tape, x: Var, kernel: Var, bias: Var, row_mask: Option<Var>) -> Result<Var> {
    let input = match row_mask {
        Some(m) => tape.mul(x, m)?,
        None => x,
    };
    let conv = tape.conv1d_same(input, kernel, bias)?;
    Ok(tape.sigmoid(conv))
}

/// Gate maps of both paths and their fusion; returns `(head, gate_o, gate_a)`.
pub fn gated_fusion(
    tape: &mut Tape,
    head_ori: Var,
    head_amp: Var,
    hw: &HeadWeights<Var>,
    row_mask: Option<Var>,
) -> Result<(Var, Var, Var)> {
    if tape.shape(head_ori) != tape.shape(head_amp) {
        return Err(Error::dim("gated_fusion", tape.shape(head_ori), tape.shape(head_amp)));
    }
    let gate_o = gate(tape, head_ori, hw.gate_o_kernel, hw.gate_o_bias, row_mask)?;
    let gate_a = gate(tape, head_amp, hw.gate_a_kernel, hw.gate_a_bias, row_mask)?;
    let head = fuse(tape, head_ori, gate_o, head_amp, gate_a)?;
    Ok((head, gate_o, gate_a))
}

/// `relu(x·W₁ + b₁)·W₂ + b₂`, with optional dropout on the hidden activation.
pub fn ffn(tape: &mut Tape, x: Var, w: &LayerWeights<Var>, dropout: &mut Option<Dropout<'_>>) -> Result<Var> {
    let hidden = tape.matmul(x, w.ffn_w1)?;
    let hidden = tape.add_bias(hidden, w.ffn_b1)?;
    let hidden = tape.relu(hidden);
    let hidden = maybe_dropout(tape, hidden, dropout)?;
    let out = tape.matmul(hidden, w.ffn_w2)?;
    tape.add_bias(out, w.ffn_b2)
}

/// Full layer; output has the same shape as `h`.
pub fn layer_forward(
    tape: &mut Tape,
    h: Var,
    enc: &EncodedInput,
    w: &LayerWeights<Var>,
    cfg: &LayerConfig,
    mode: AblationMode,
    dropout: &mut Option<Dropout<'_>>,
) -> Result<(Var, AttentionTrace)> {
    cfg.validate()?;
    if w.heads.len() != cfg.heads {
        return Err(Error::Config(format!(
            "{} head weights for {} heads",
            w.heads.len(),
            cfg.heads
        )));
    }
    let n = enc.len();
    if tape.shape(h) != [n, cfg.d_model] {
        return Err(Error::dim("layer_forward", tape.shape(h), &[n, cfg.d_model]));
    }
    let att = attention_scores(tape, h, w, cfg, &enc.pad_mask)?;
    let amplify = tape.constant(enc.amplify.clone());
    let dk = cfg.d_k();
    let row_mask = if enc.pad_mask.contains(&0) {
        let data = enc
            .pad_mask
            .iter()
            .flat_map(|&m| std::iter::repeat_n(f64::from(m), dk))
            .collect();
        Some(tape.constant(Tensor::new(vec![n, dk], data)?))
    } else {
        None
    };

    let mut fused_heads = Vec::with_capacity(cfg.heads);
    let mut traces = Vec::with_capacity(cfg.heads);
    for (hs, hw) in att.heads.iter().zip(&w.heads) {
        let scores = maybe_dropout(tape, hs.scores, dropout)?;
        let head_ori = tape.matmul(scores, hs.values)?;
        let (head_amp, _) = amplified_attention(tape, scores, amplify, hs.values)?;
        let gate_o = gate(tape, head_ori, hw.gate_o_kernel, hw.gate_o_bias, row_mask)?;
        let gate_a = gate(tape, head_amp, hw.gate_a_kernel, hw.gate_a_bias, row_mask)?;
        let head = match mode {
            AblationMode::Full => fuse(tape, head_ori, gate_o, head_amp, gate_a)?,
            AblationMode::NoOriginal => fuse(tape, head_amp, gate_a, head_amp, gate_a)?,
            AblationMode::NoAmplified => fuse(tape, head_ori, gate_o, head_ori, gate_o)?,
            AblationMode::NoGatedFusion => {
                let both = tape.concat_cols(&[head_ori, head_amp])?;
                let merged = tape.matmul(both, hw.fuse_w)?;
                tape.add_bias(merged, hw.fuse_b)?
            }
        };
        fused_heads.push(head);

        let score_ori = tape.value(hs.scores).clone();
        let score_amp = amplify_tensor(&score_ori, &enc.amplify);
        traces.push(HeadTrace {
            score_ori,
            score_amp,
            gate_o: tape.value(gate_o).clone(),
            gate_a: tape.value(gate_a).clone(),
        });
    }

    let concat = tape.concat_cols(&fused_heads)?;
    let multi = tape.matmul(concat, w.w_h)?;
    let residual_base = if cfg.double_ln { att.normed } else { h };
    let mid = tape.add(residual_base, multi)?;
    let mid = tape.layer_norm(mid, w.ln_mid_gamma, w.ln_mid_beta, cfg.ln_eps)?;
    let ff = ffn(tape, mid, w, dropout)?;
    let out = tape.add(ff, mid)?;
    let out = tape.layer_norm(out, w.ln_out_gamma, w.ln_out_beta, cfg.ln_eps)?;
    Ok((out, AttentionTrace { heads: traces }))
}

fn amplify_tensor(scores: &Tensor, amplify: &Tensor) -> Tensor {
    let data = scores.data().iter().zip(amplify.data()).map(|(s, g)| s * g).collect();
    Tensor::new(scores.shape().to_vec(), data).expect("same shape")
}
