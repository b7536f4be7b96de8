use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layer::{AblationMode, LayerConfig};
use crate::model::ModelConfig;
use crate::tensor::LN_EPS;

/// Every knob of a training run. Serialized as flat `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub heads: usize,
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub gate_width: usize,
    pub ln_eps: f64,
    pub double_ln: bool,
    pub pool_special: bool,
    pub dropout: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: AblationMode,
    pub min_count: usize,
    /// Share of the training data held out for best-epoch selection when
    /// no separate validation set is given.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            heads: 4,
            layers: 1,
            d_model: 64,
            d_ff: 128,
            max_len: 32,
            gate_width: 3,
            ln_eps: LN_EPS,
            double_ln: true,
            pool_special: true,
            dropout: 0.2,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            epochs: 50,
            batch_size: 16,
            seed: 7,
            mode: AblationMode::Full,
            min_count: 1,
            val_fraction: 0.1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.layer_config().validate()?;
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("layers must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.max_len < 4 {
            return fail("max_len must be >= 4".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must be in [0, 1)".into());
        }
        if self.eps_adam <= 0.0 {
            return fail("eps_adam must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        Ok(())
    }

    pub fn layer_config(&self) -> LayerConfig {
        LayerConfig {
            d_model: self.d_model,
            heads: self.heads,
            d_ff: self.d_ff,
            gate_width: self.gate_width,
            ln_eps: self.ln_eps,
            double_ln: self.double_ln,
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            max_len: self.max_len,
            layers: self.layers,
            layer: self.layer_config(),
            pool_special: self.pool_special,
        }
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "heads" => self.heads = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "d_ff" => self.d_ff = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "gate_width" => self.gate_width = parse(key, v)?,
            "ln_eps" => self.ln_eps = parse(key, v)?,
            "double_ln" => self.double_ln = parse(key, v)?,
            "pool_special" => self.pool_special = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "eps_adam" => self.eps_adam = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "min_count" => self.min_count = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines over `self`; `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv(&text)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        put("heads", self.heads.to_string());
        put("layers", self.layers.to_string());
        put("d_model", self.d_model.to_string());
        put("d_ff", self.d_ff.to_string());
        put("max_len", self.max_len.to_string());
        put("gate_width", self.gate_width.to_string());
        put("ln_eps", self.ln_eps.to_string());
        put("double_ln", self.double_ln.to_string());
        put("pool_special", self.pool_special.to_string());
        put("dropout", self.dropout.to_string());
        put("lr", self.lr.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("eps_adam", self.eps_adam.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("seed", self.seed.to_string());
        put("mode", self.mode.to_string());
        put("min_count", self.min_count.to_string());
        put("val_fraction", self.val_fraction.to_string());
        s
    }
}
