//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"AFFATTN1" | u64 header_len | header JSON
//! u64 tensor_count | per tensor: u32 name_len | name | u32 ndim | u64 dims.. | f64 data..
//! ```
//!
//! Model parameters use their own names; running means are stored as
//! `ema.layers.{l}.alpha_ma`; other subsystems (the optimizer) add their
//! own prefixed tensors.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::EmaState;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{ModelConfig, TransformerModel};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"AFFATTN1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Optimizer steps completed when the checkpoint was taken.
    pub step: usize,
    /// Update count of each layer's running mean.
    #[serde(default)]
    pub ema_steps: Vec<u64>,
    /// Free-form metadata owned by the training loop.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor)>,
}

fn ema_name(layer: usize) -> String {
    format!("ema.layers.{layer}.alpha_ma")
}

impl Checkpoint {
    pub fn from_model(model: &TransformerModel, step: usize) -> Self {
        let mut tensors: Vec<(String, Tensor)> = model
            .params()
            .iter()
            .map(|p| {
                let t = Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec())
                    .expect("parameter shape");
                (p.name.clone(), t)
            })
            .collect();
        for (l, e) in model.ema().iter().enumerate() {
            tensors.push((ema_name(l), Tensor::from_vec(e.alpha_ma.clone())));
        }
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                model: model.config().clone(),
                step,
                ema_steps: model.ema().iter().map(|e| e.step_count).collect(),
                extra: serde_json::Value::Null,
            },
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    /// Rebuilds the model, including the running means.
    pub fn to_model(&self) -> Result<TransformerModel> {
        let config = self.header.model.clone();
        let mut by_name: HashMap<String, Tensor> = self.tensors.iter().cloned().collect();
        let mut ema = Vec::new();
        for (l, &steps) in self.header.ema_steps.iter().enumerate() {
            let t = by_name
                .remove(&ema_name(l))
                .ok_or_else(|| Error::Format(format!("missing {}", ema_name(l))))?;
            let mut e = EmaState::new(t.numel(), config.rho)?;
            e.alpha_ma = t.into_data();
            e.step_count = steps;
            ema.push(e);
        }
        TransformerModel::from_parts(config, by_name, ema)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * 8).sum();
        let mut out = Vec::with_capacity(32 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let header_len = r.len_u64()?;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                header.format_version
            )));
        }
        let count = r.len_u64()?;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Format(format!("tensor '{name}' overruns the file")))?;
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format("length does not fit in memory".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::model::ForwardOptions;
    use crate::numerics::Tape;

    fn model() -> TransformerModel {
        let c = ModelConfig {
            vocab_size: 11,
            model_dim: 8,
            num_heads: 2,
            num_layers: 2,
            max_seq_len: 4,
            ..ModelConfig::default()
        }
        .with_attention(AttentionKind::Affine, true);
        let mut m = TransformerModel::new(c).unwrap();
        let mut tape = Tape::new();
        m.forward(&mut tape, &[1, 2, 3], 1, 3, ForwardOptions::train())
            .unwrap();
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let mut ck = Checkpoint::from_model(&m, 17);
        ck.push("adam.m.tok_emb", Tensor::full(&[2, 3], -0.25));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        let m2 = back.to_model().unwrap();
        assert_eq!(m2.params(), m.params());
        assert_eq!(m2.ema(), m.ema());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = Checkpoint::from_model(&model(), 0).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT"), Err(Error::Format(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn missing_parameter_is_a_format_error() {
        let mut ck = Checkpoint::from_model(&model(), 0);
        ck.tensors.retain(|(n, _)| n != "layers.1.w_alpha");
        assert!(matches!(ck.to_model(), Err(Error::Format(_))));
    }
}
