//! Versioned little-endian binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic      b"DQAW"
//! version    u32
//! header_len u32, header JSON {"model": ModelConfig, "vocab": {..}, "kind": "full"|"adapters"}
//! count      u32
//! count x {
//!   name_len u32, name utf-8
//!   dtype    u8  (1 = f64, 2 = f32)
//!   flags    u8  (bit 0: trainable)
//!   ndim     u32, dims u64 x ndim
//!   payload  numel x dtype, little-endian
//! }
//! ```
//!
//! Writers always emit f64, so a save/load round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, QaModel};
use crate::params::ParamGroup;
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

pub const MAGIC: &[u8; 4] = b"DQAW";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const DTYPE_F32: u8 = 2;
const FLAG_TRAINABLE: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Every parameter.
    Full,
    /// LoRA factors only; load onto a model built from the same config.
    Adapters,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    vocab: serde_json::Value,
    kind: CheckpointKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub kind: CheckpointKind,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &QaModel, vocab: &Vocab, kind: CheckpointKind) -> Self {
        let tensors = model
            .store
            .iter()
            .filter(|(_, p)| kind == CheckpointKind::Full || p.group == ParamGroup::Adapter)
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                tensor: p.tensor.clone(),
            })
            .collect();
        Self {
            config: model.config.clone(),
            vocab: vocab.clone(),
            kind,
            tensors,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = Header {
            model: self.config.clone(),
            vocab: serde_json::from_str(&self.vocab.to_json()?)?,
            kind: self.kind,
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&len_u32(header.len(), "header")?.to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&len_u32(self.tensors.len(), "tensor count")?.to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&len_u32(t.name.len(), "name")?.to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&[DTYPE_F64, if t.tensor.requires_grad { FLAG_TRAINABLE } else { 0 }])?;
            let shape = t.tensor.shape();
            w.write_all(&len_u32(shape.len(), "ndim")?.to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.tensor.numel() * 8);
            for v in t.tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(r, "version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = read_u32(r, "header length")? as usize;
        let mut header = vec![0u8; header_len];
        read_exact(r, &mut header, "header")?;
        let header: Header = serde_json::from_slice(&header)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let vocab = Vocab::from_json(&header.vocab.to_string())?;
        let count = read_u32(r, "tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = read_u32(r, "name length")? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name, "name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let mut tag = [0u8; 2];
            read_exact(r, &mut tag, "dtype")?;
            let ndim = read_u32(r, "ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(r, &mut b, "dims")?;
                shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Checkpoint("dim overflow".into()))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("`{name}`: shape overflow")))?;
            let data = match tag[0] {
                DTYPE_F64 => {
                    let mut buf = vec![0u8; numel * 8];
                    read_exact(r, &mut buf, "payload")?;
                    buf.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect()
                }
                DTYPE_F32 => {
                    let mut buf = vec![0u8; numel * 4];
                    read_exact(r, &mut buf, "payload")?;
                    buf.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                        .collect()
                }
                other => return Err(Error::Checkpoint(format!("`{name}`: unknown dtype {other}"))),
            };
            let tensor = Tensor::new(shape, data)?.with_requires_grad(tag[1] & FLAG_TRAINABLE != 0);
            tensors.push(NamedTensor { name, tensor });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self {
            config: header.model,
            vocab,
            kind: header.kind,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Copies tensors into `model` by name. With `strict`, every model
    /// parameter must be covered (adapter checkpoints: every adapter).
    /// Unknown names and shape mismatches are always errors.
    pub fn apply(&self, model: &mut QaModel, strict: bool) -> Result<()> {
        let mut seen = vec![false; model.store.len()];
        for t in &self.tensors {
            let id = model
                .store
                .id(&t.name)
                .ok_or_else(|| Error::UnknownParam(t.name.clone()))?;
            let dst = model.store.tensor_mut(id);
            if dst.shape() != t.tensor.shape() {
                return Err(Error::Shape {
                    op: "checkpoint load",
                    lhs: dst.shape().to_vec(),
                    rhs: t.tensor.shape().to_vec(),
                });
            }
            dst.data_mut().copy_from_slice(t.tensor.data());
            seen[id.0] = true;
        }
        if strict {
            let missing = model.store.iter().find(|(id, p)| {
                !seen[id.0] && (self.kind == CheckpointKind::Full || p.group == ParamGroup::Adapter)
            });
            if let Some((_, p)) = missing {
                return Err(Error::Checkpoint(format!("missing tensor `{}`", p.name)));
            }
        }
        Ok(())
    }

    /// Builds a model from the stored config and loads every tensor.
    pub fn into_model(&self) -> Result<QaModel> {
        if self.kind != CheckpointKind::Full {
            return Err(Error::Checkpoint("adapter checkpoint needs a base model".into()));
        }
        let mut model = QaModel::new(self.config.clone(), 0)?;
        self.apply(&mut model, true)?;
        Ok(model)
    }
}

pub fn save_model(path: &Path, model: &QaModel, vocab: &Vocab, kind: CheckpointKind) -> Result<()> {
    Checkpoint::from_model(model, vocab, kind).save(path)
}

/// Loads a full checkpoint: the model and the vocabulary it was trained with.
pub fn load_model(path: &Path) -> Result<(QaModel, Vocab)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.into_model()?, ck.vocab))
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{what} too large")))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn tiny() -> (QaModel, Vocab) {
        let vocab = Vocab::build(&["地震が発生しました"], 1).unwrap();
        let mut enc = EncoderConfig::toy(vocab.len());
        enc.d_model = 8;
        enc.n_heads = 2;
        enc.d_ffn = 16;
        enc.n_layers = 1;
        enc.max_position = 32;
        let mut model = QaModel::new(ModelConfig::with_encoder(enc), 5).unwrap();
        for (_, p) in model.store.iter_mut() {
            for (i, v) in p.tensor.data_mut().iter_mut().enumerate() {
                *v += (i as f64 * 0.37).sin() * 1e-3;
            }
        }
        (model, vocab)
    }

    #[test]
    fn full_roundtrip_is_bit_exact() {
        let (model, vocab) = tiny();
        let mut bytes = Vec::new();
        Checkpoint::from_model(&model, &vocab, CheckpointKind::Full)
            .write_to(&mut bytes)
            .unwrap();
        let ck = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(ck.vocab, vocab);
        let back = ck.into_model().unwrap();
        for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.requires_grad, b.tensor.requires_grad);
            assert!(a.tensor.data().iter().zip(b.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut again = Vec::new();
        Checkpoint::from_model(&back, &vocab, CheckpointKind::Full)
            .write_to(&mut again)
            .unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn adapter_checkpoint_holds_only_lora() {
        let (model, vocab) = tiny();
        let ck = Checkpoint::from_model(&model, &vocab, CheckpointKind::Adapters);
        assert_eq!(ck.tensors.len(), 4);
        assert!(ck.tensors.iter().all(|t| t.name.starts_with("lora.")));
        let mut base = QaModel::new(model.config.clone(), 99).unwrap();
        ck.apply(&mut base, true).unwrap();
        let name = "lora.0.q.A";
        assert_eq!(
            base.store.by_name(name).unwrap().tensor.data(),
            model.store.by_name(name).unwrap().tensor.data()
        );
        assert!(ck.into_model().is_err());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (model, vocab) = tiny();
        let mut bytes = Vec::new();
        Checkpoint::from_model(&model, &vocab, CheckpointKind::Full)
            .write_to(&mut bytes)
            .unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(Checkpoint::read_from(&mut &cut[..]), Err(Error::Checkpoint(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::read_from(&mut long.as_slice()).is_err());
    }

    #[test]
    fn strict_and_unknown_names() {
        let (model, vocab) = tiny();
        let mut ck = Checkpoint::from_model(&model, &vocab, CheckpointKind::Full);
        ck.tensors.pop();
        let mut target = QaModel::new(model.config.clone(), 1).unwrap();
        assert!(ck.apply(&mut target, true).is_err());
        ck.apply(&mut target, false).unwrap();
        ck.tensors[0].name = "nope".into();
        assert!(matches!(ck.apply(&mut target, false), Err(Error::UnknownParam(_))));
    }

    #[test]
    fn f32_payloads_are_widened() {
        let (model, vocab) = tiny();
        let mut ck = Checkpoint::from_model(&model, &vocab, CheckpointKind::Adapters);
        ck.tensors.truncate(1);
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        // Rewrite the single tensor's payload as f32.
        let t = &ck.tensors[0];
        let payload = t.tensor.numel() * 8;
        let head = bytes.len() - payload;
        let dtype_at = head - 4 - 8 * t.tensor.shape().len() - 2;
        bytes[dtype_at] = DTYPE_F32;
        bytes.truncate(head);
        for v in t.tensor.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        let got = back.tensors[0].tensor.data();
        assert!(got.iter().zip(t.tensor.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }
}
