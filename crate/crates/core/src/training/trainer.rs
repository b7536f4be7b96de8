use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::config::TrainConfig;
use super::metrics::Metrics;
use crate::checkpoint::Checkpoint;
use crate::encoding::{build_vocab, encode, EncodedInput, Example, Polarity, Vocabulary};
use crate::error::{Error, Result};
use crate::layer::{AblationMode, Dropout};
use crate::model::{forward, forward_on_tape, loss, ModelConfig, ModelParams, Prediction};
use crate::tensor::Tape;

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_DROPOUT: u64 = 2;
const STREAM_SPLIT: u64 = 3;

/// Independent RNG stream `stream` derived from the root seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One row of the metric history.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the selected epoch.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    /// Validation metrics of the kept parameters, when a validation set exists.
    pub val_metrics: Option<Metrics>,
}

/// Seeded holdout: returns `(train, val)`; `val` is empty when `fraction` is 0.
pub fn split_validation(data: &[Example], fraction: f64, seed: u64) -> (Vec<Example>, Vec<Example>) {
    let n_val = ((data.len() as f64) * fraction).round() as usize;
    let n_val = n_val.min(data.len().saturating_sub(1));
    if n_val == 0 {
        return (data.to_vec(), Vec::new());
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut stream_rng(seed, STREAM_SPLIT));
    let mut val_idx = idx[..n_val].to_vec();
    val_idx.sort_unstable();
    let mut is_val = vec![false; data.len()];
    for &i in &val_idx {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (ex, v) in data.iter().zip(is_val) {
        if v {
            val.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    (train, val)
}

/// Encodes and strips the padding tail.
///
/// Padded positions never influence real ones, so trimming only saves work.
pub fn encode_all(data: &[Example], vocab: &Vocabulary, max_len: usize) -> Result<Vec<EncodedInput>> {
    data.iter()
        .map(|ex| encode(ex, vocab, max_len).map(|e| e.trimmed()))
        .collect()
}

/// Summed gradients and losses of a batch, accumulated in input order.
pub struct BatchGrads {
    pub grads: Vec<Vec<f64>>,
    pub loss_sum: f64,
    pub predictions: Vec<Polarity>,
}

pub fn batch_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[&EncodedInput],
    mode: AblationMode,
    mut dropout: Option<Dropout<'_>>,
) -> Result<BatchGrads> {
    let mut grads: Vec<Vec<f64>> = params.flat().iter().map(|t| vec![0.0; t.numel()]).collect();
    let mut loss_sum = 0.0;
    let mut predictions = Vec::with_capacity(batch.len());
    for enc in batch {
        let mut tape = Tape::new();
        let w = params.bind(&mut tape, true);
        let out = forward_on_tape(&mut tape, enc, &w, cfg, mode, &mut dropout)?;
        let probs = tape.value(out.probs).data().to_vec();
        let l = loss(&mut tape, &out, enc.label)?;
        loss_sum += tape.value(l).data()[0];
        tape.backward(l)?;
        for (acc, v) in grads.iter_mut().zip(w.flat()) {
            if let Some(g) = tape.grad(*v) {
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
        }
        predictions.push(Prediction::from_probs(probs, Vec::new()).predicted);
    }
    Ok(BatchGrads {
        grads,
        loss_sum,
        predictions,
    })
}

/// Applies one Adam update with the batch-mean gradient; returns the mean loss.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    cfg: &ModelConfig,
    adam: &AdamConfig,
    batch: &[&EncodedInput],
    mode: AblationMode,
    dropout: Option<Dropout<'_>>,
) -> Result<(f64, Vec<Polarity>)> {
    let mut bg = batch_gradients(params, cfg, batch, mode, dropout)?;
    let scale = 1.0 / batch.len() as f64;
    for g in &mut bg.grads {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    let mean_loss = bg.loss_sum * scale;
    if !mean_loss.is_finite() {
        return Err(Error::Numeric(format!("loss became {mean_loss}")));
    }
    let names = params.names();
    adam_step(&mut params.flat_mut(), &bg.grads, &names, state, adam)?;
    Ok((mean_loss, bg.predictions))
}

/// Deterministic metrics of `params` over pre-encoded inputs.
pub fn evaluate_encoded(
    encoded: &[EncodedInput],
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: AblationMode,
) -> Result<Metrics> {
    if encoded.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut gold = Vec::with_capacity(encoded.len());
    let mut pred = Vec::with_capacity(encoded.len());
    let mut loss_sum = 0.0;
    for enc in encoded {
        let p = forward(enc, params, cfg, mode)?;
        loss_sum += p.loss(enc.label).value;
        gold.push(enc.label);
        pred.push(p.predicted);
    }
    Metrics::from_predictions(&gold, &pred, loss_sum / encoded.len() as f64)
}

/// Dropout-free evaluation of a checkpoint on raw examples.
pub fn evaluate(data: &[Example], ckpt: &Checkpoint, mode: AblationMode) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let encoded = encode_all(data, &ckpt.vocab, ckpt.config.max_len)?;
    evaluate_encoded(&encoded, &ckpt.params, &ckpt.config, mode)
}

/// Seeded mini-batch training with best-epoch selection on validation accuracy.
///
/// Without `val`, `cfg.val_fraction` of `data` is held out. If the holdout is
/// empty the final epoch is kept.
pub fn train(data: &[Example], val: Option<&[Example]>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let (train_set, val_set) = match val {
        Some(v) => (data.to_vec(), v.to_vec()),
        None => split_validation(data, cfg.val_fraction, cfg.seed),
    };
    let vocab = build_vocab(&train_set, cfg.min_count)?;
    let model_cfg = cfg.model_config(vocab.len());
    model_cfg.validate()?;
    let train_enc = encode_all(&train_set, &vocab, cfg.max_len)?;
    let val_enc = encode_all(&val_set, &vocab, cfg.max_len)?;

    let mut params = ModelParams::init(&model_cfg, &mut stream_rng(cfg.seed, STREAM_INIT))?;
    let mut shuffle_rng = stream_rng(cfg.seed, STREAM_SHUFFLE);
    let mut dropout_rng = stream_rng(cfg.seed, STREAM_DROPOUT);
    let adam = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps_adam,
    };
    let mut state = AdamState::new(params.flat());
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ModelParams, Metrics)> = None;
    let mut order: Vec<usize> = (0..train_enc.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut gold = Vec::with_capacity(order.len());
        let mut pred = Vec::with_capacity(order.len());
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&EncodedInput> = chunk.iter().map(|&i| &train_enc[i]).collect();
            let dropout = Some(Dropout {
                p: cfg.dropout,
                rng: &mut dropout_rng,
            });
            let (mean_loss, preds) = train_step(&mut params, &mut state, &model_cfg, &adam, &batch, cfg.mode, dropout)
                .map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {}: {m}", b + 1)),
                    other => other,
                })?;
            loss_sum += mean_loss * chunk.len() as f64;
            gold.extend(batch.iter().map(|e| e.label));
            pred.extend(preds);
        }
        let tm = Metrics::from_predictions(&gold, &pred, loss_sum / order.len() as f64)?;
        history.push(EpochRecord {
            epoch,
            split: Split::Train,
            loss: tm.loss,
            accuracy: tm.accuracy,
            macro_f1: tm.macro_f1,
        });

        if !val_enc.is_empty() {
            let vm = evaluate_encoded(&val_enc, &params, &model_cfg, cfg.mode)?;
            history.push(EpochRecord {
                epoch,
                split: Split::Val,
                loss: vm.loss,
                accuracy: vm.accuracy,
                macro_f1: vm.macro_f1,
            });
            if best.as_ref().is_none_or(|(_, acc, _, _)| vm.accuracy > *acc) {
                best = Some((epoch, vm.accuracy, params.clone(), vm));
            }
        }
    }

    let (best_epoch, params, val_metrics) = match best {
        Some((e, _, p, m)) => (e, p, Some(m)),
        None => (cfg.epochs, params, None),
    };
    let meta = format!("{}best_epoch={best_epoch}\n", cfg.to_kv());
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: model_cfg,
            vocab,
            params,
            meta,
        },
        history,
        best_epoch,
        val_metrics,
    })
}
