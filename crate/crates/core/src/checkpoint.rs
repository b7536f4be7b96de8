//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "A3SNCKPT"
//! version   u32
//! header    u64 vocab_size, d_model, layers, heads, max_len, d_ff, gate_width
//!           f64 ln_eps; u8 double_ln; u8 pool_special
//! meta      u32 length + UTF-8 text (free-form key=value lines)
//! vocab     u32 count + count × (u32 length + UTF-8 token), reserved ids excluded
//! tensors   u32 count + count × (u32 name length, name, u32 rank, rank × u64 dim,
//!           numel × f64)
//! ```
//!
//! Tensors are stored in canonical order; payloads are raw IEEE-754 bits so
//! a save/load round trip is bit-exact.

use std::fs;
use std::path::Path;

use crate::encoding::Vocabulary;
use crate::error::{Error, Result};
use crate::layer::LayerConfig;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"A3SNCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to run a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams,
    pub meta: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.params.check_config(&self.config)?;
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let c = &self.config;
        for v in [
            c.vocab_size,
            c.layer.d_model,
            c.layers,
            c.layer.heads,
            c.max_len,
            c.layer.d_ff,
            c.layer.gate_width,
        ] {
            w.extend_from_slice(&(v as u64).to_le_bytes());
        }
        w.extend_from_slice(&c.layer.ln_eps.to_le_bytes());
        w.push(u8::from(c.layer.double_ln));
        w.push(u8::from(c.pool_special));
        put_str(&mut w, &self.meta);
        let tokens = self.vocab.content_tokens();
        w.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
        for t in tokens {
            put_str(&mut w, t);
        }
        let names = self.params.names();
        let flat = self.params.flat();
        w.extend_from_slice(&(flat.len() as u32).to_le_bytes());
        for (name, t) in names.iter().zip(flat) {
            put_str(&mut w, name);
            w.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not an a3sn checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = r.u64()? as usize;
        }
        let [vocab_size, d_model, layers, heads, max_len, d_ff, gate_width] = dims;
        let ln_eps = f64::from_le_bytes(r.array()?);
        let double_ln = r.u8()? != 0;
        let pool_special = r.u8()? != 0;
        let config = ModelConfig {
            vocab_size,
            max_len,
            layers,
            layer: LayerConfig {
                d_model,
                heads,
                d_ff,
                gate_width,
                ln_eps,
                double_ln,
            },
            pool_special,
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
        let meta = r.string()?;
        let n_tokens = r.u32()? as usize;
        let mut tokens = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            tokens.push(r.string()?);
        }
        let vocab = Vocabulary::from_tokens(tokens).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if vocab.len() != vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocabulary has {} entries, header says {vocab_size}",
                vocab.len()
            )));
        }

        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n_tensors);
        let mut names = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            names.push(r.string()?);
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }

        let template = ModelParams::init(&config, &mut rand::SeedableRng::seed_from_u64(0))?;
        if template.names() != names {
            return Err(Error::Checkpoint(
                "tensor names do not match the configured architecture".into(),
            ));
        }
        let params = template.rebuild(&tensors)?;
        params.check_config(&config)?;
        Ok(Checkpoint {
            config,
            vocab,
            params,
            meta,
        })
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

pub fn save_params(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Loads a checkpoint and requires its architecture to equal `expected`.
pub fn load_params_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckpt = load_params(path)?;
    if ckpt.config != *expected {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: file has d_model={} layers={} heads={} max_len={} vocab={}, expected d_model={} layers={} heads={} max_len={} vocab={}",
            ckpt.config.layer.d_model,
            ckpt.config.layers,
            ckpt.config.layer.heads,
            ckpt.config.max_len,
            ckpt.config.vocab_size,
            expected.layer.d_model,
            expected.layers,
            expected.layer.heads,
            expected.max_len,
            expected.vocab_size,
        )));
    }
    Ok(ckpt)
}
