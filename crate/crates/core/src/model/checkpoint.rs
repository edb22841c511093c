//! PQCK checkpoint format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      "PQCK"
//! version    u32 (= 1)
//! config     u32 x 6: vocab_size, block_size, n_layer, n_head, n_embd, flags
//!            (flags bit 0: lm_head tied to tok_emb)
//! count      u32
//! tensor*    u16 name_len, name (UTF-8), u8 rank, u64 dims[rank],
//!            u8 dtype (0 = f32), raw values
//! crc32      u32 over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::config::GPTConfig;
use super::weights::{GPTWeights, LayerNormWeights, LayerWeights, Linear, LinearKind};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PQCK";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const FLAG_TIED_LM_HEAD: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn position(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::ByteCount(format!(
                "{what}: needed {n} bytes at offset {}, only {} remain",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.array::<1>(what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::ByteCount(format!("{what}: element count {n} overflows")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn read_tensor(r: &mut ByteReader<'_>) -> Result<(String, Tensor)> {
    let name_len = r.u16("tensor name length")? as usize;
    let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
        .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
        .to_string();
    let rank = r.u8("tensor rank")? as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!(
            "{name}: rank {rank} exceeds {MAX_RANK}"
        )));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.u64("tensor dims")? as usize);
    }
    let dtype = r.u8("tensor dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!(
            "{name}: unsupported dtype code {dtype}"
        )));
    }
    let numel = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::ByteCount(format!("{name}: dims {dims:?} overflow")))?;
    let data = r.f32s(numel, &format!("values of {name}"))?;
    Ok((name, Tensor::new(dims, data)?))
}

/// Parses a checkpoint image held in memory.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<GPTWeights> {
    let mut r = ByteReader::new(bytes);
    let magic = r.array::<4>("magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let mut fields = [0u32; 6];
    for f in fields.iter_mut() {
        *f = r.u32("config block")?;
    }
    let config = GPTConfig {
        vocab_size: fields[0] as usize,
        block_size: fields[1] as usize,
        n_layer: fields[2] as usize,
        n_head: fields[3] as usize,
        n_embd: fields[4] as usize,
    };
    let tied = fields[5] & FLAG_TIED_LM_HEAD != 0;
    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let (name, t) = read_tensor(&mut r)?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    let body_len = r.position();
    let stored = r.u32("trailing checksum")?;
    if r.remaining() != 0 {
        return Err(Error::ByteCount(format!(
            "{} unexpected bytes after checksum",
            r.remaining()
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_len]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    config.validate()?;
    assemble(config, tied, tensors)
}

fn assemble(
    config: GPTConfig,
    tied: bool,
    mut tensors: BTreeMap<String, Tensor>,
) -> Result<GPTWeights> {
    let mut take = |name: &str| -> Result<Tensor> {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    };
    let tok_emb = take("tok_emb")?;
    let pos_emb = take("pos_emb")?;
    let mut layers = Vec::with_capacity(config.n_layer);
    for i in 0..config.n_layer {
        let ln =
            |tag: &str, take: &mut dyn FnMut(&str) -> Result<Tensor>| -> Result<LayerNormWeights> {
                Ok(LayerNormWeights {
                    gamma: take(&format!("layer{i}.{tag}.gamma"))?,
                    beta: take(&format!("layer{i}.{tag}.beta"))?,
                })
            };
        let ln1 = ln("ln1", &mut take)?;
        let ln2 = ln("ln2", &mut take)?;
        let mut lin = |kind: LinearKind| -> Result<Linear> {
            let name = format!("layer{i}.{}", kind.as_str());
            Ok(Linear {
                weight: take(&format!("{name}.weight"))?,
                bias: None,
            })
        };
        layers.push(LayerWeights {
            ln1,
            attn_qkv: lin(LinearKind::AttnQkv)?,
            attn_proj: lin(LinearKind::AttnProj)?,
            ln2,
            mlp_up: lin(LinearKind::MlpUp)?,
            mlp_down: lin(LinearKind::MlpDown)?,
        });
    }
    let ln_f = LayerNormWeights {
        gamma: take("ln_f.gamma")?,
        beta: take("ln_f.beta")?,
    };
    let lm_weight = if tied {
        if tensors.contains_key("lm_head.weight") {
            return Err(Error::Format(
                "tied checkpoint also stores lm_head.weight".into(),
            ));
        }
        None
    } else {
        Some(take("lm_head.weight")?)
    };
    // Biases are optional; anything left afterwards is unexpected.
    for (i, layer) in layers.iter_mut().enumerate() {
        for kind in LinearKind::ALL {
            let name = format!("layer{i}.{}.bias", kind.as_str());
            layer.linear_mut(kind).bias = tensors.remove(&name);
        }
    }
    let lm_bias = tensors.remove("lm_head.bias");
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {extra}")));
    }
    let lm_head = Linear {
        weight: match lm_weight {
            Some(w) => w,
            None => {
                if tok_emb.rank() != 2 {
                    return Err(Error::Shape(format!(
                        "tok_emb: expected a matrix, found {:?}",
                        tok_emb.shape()
                    )));
                }
                tok_emb.transpose2d()?
            }
        },
        bias: lm_bias,
    };
    let weights = GPTWeights {
        config,
        tok_emb,
        pos_emb,
        layers,
        ln_f,
        lm_head,
        tied_lm_head: tied,
    };
    weights.validate()?;
    Ok(weights)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<GPTWeights> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(DTYPE_F32);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Tensors in the order they are written.
pub fn named_tensors(w: &GPTWeights) -> Vec<(String, &Tensor)> {
    let mut v: Vec<(String, &Tensor)> = vec![
        ("tok_emb".into(), &w.tok_emb),
        ("pos_emb".into(), &w.pos_emb),
    ];
    for (i, l) in w.layers.iter().enumerate() {
        v.push((format!("layer{i}.ln1.gamma"), &l.ln1.gamma));
        v.push((format!("layer{i}.ln1.beta"), &l.ln1.beta));
        v.push((format!("layer{i}.ln2.gamma"), &l.ln2.gamma));
        v.push((format!("layer{i}.ln2.beta"), &l.ln2.beta));
        for kind in LinearKind::ALL {
            let lin = l.linear(kind);
            let name = format!("layer{i}.{}", kind.as_str());
            v.push((format!("{name}.weight"), &lin.weight));
            if let Some(b) = &lin.bias {
                v.push((format!("{name}.bias"), b));
            }
        }
    }
    v.push(("ln_f.gamma".into(), &w.ln_f.gamma));
    v.push(("ln_f.beta".into(), &w.ln_f.beta));
    if !w.tied_lm_head {
        v.push(("lm_head.weight".into(), &w.lm_head.weight));
    }
    if let Some(b) = &w.lm_head.bias {
        v.push(("lm_head.bias".into(), b));
    }
    v
}

pub fn encode_checkpoint(w: &GPTWeights) -> Result<Vec<u8>> {
    w.validate()?;
    let c = &w.config;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let flags = if w.tied_lm_head { FLAG_TIED_LM_HEAD } else { 0 };
    for f in [c.vocab_size, c.block_size, c.n_layer, c.n_head, c.n_embd] {
        let f = u32::try_from(f)
            .map_err(|_| Error::InvalidConfig(format!("config field {f} exceeds u32")))?;
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&flags.to_le_bytes());
    let tensors = named_tensors(w);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        write_tensor(&mut out, name, t);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint(w: &GPTWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(w)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
