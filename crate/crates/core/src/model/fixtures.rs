//! Reference-logit fixtures produced by the exporter.
//!
//! Layout (little-endian): `u32 n`, then per fixture `u32 len`,
//! `len` x `u16` token ids, `len * vocab` x `f32` logits.

use std::fs;
use std::path::Path;

use super::checkpoint::ByteReader;
use super::forward::LanguageModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LogitFixture {
    pub tokens: Vec<u16>,
    /// `[len, vocab]`
    pub logits: Tensor,
}

pub fn decode_fixtures(bytes: &[u8], vocab_size: usize) -> Result<Vec<LogitFixture>> {
    let mut r = ByteReader::new(bytes);
    let n = r.u32("fixture count")?;
    let mut out = Vec::with_capacity(n as usize);
    for i in 0..n {
        let len = r.u32("fixture length")? as usize;
        if len == 0 {
            return Err(Error::Format(format!("fixture {i} has an empty prompt")));
        }
        let tokens = r
            .take(2 * len, "fixture tokens")?
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let logits = r.f32s(len * vocab_size, "fixture logits")?;
        out.push(LogitFixture {
            tokens,
            logits: Tensor::new(vec![len, vocab_size], logits)?,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::ByteCount(format!(
            "{} trailing bytes after {n} fixtures (vocab {vocab_size})",
            r.remaining()
        )));
    }
    Ok(out)
}

pub fn encode_fixtures(fixtures: &[LogitFixture]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(fixtures.len() as u32).to_le_bytes());
    for f in fixtures {
        out.extend_from_slice(&(f.tokens.len() as u32).to_le_bytes());
        for t in &f.tokens {
            out.extend_from_slice(&t.to_le_bytes());
        }
        for v in f.logits.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_fixtures(path: impl AsRef<Path>, vocab_size: usize) -> Result<Vec<LogitFixture>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fixtures(&bytes, vocab_size)
}

/// Largest absolute logit deviation between `model` and the fixtures.
pub fn max_fixture_deviation(model: &dyn LanguageModel, fixtures: &[LogitFixture]) -> Result<f64> {
    let mut worst = 0.0f64;
    for f in fixtures {
        let tokens: Vec<usize> = f.tokens.iter().map(|&t| t as usize).collect();
        let logits = model.forward(&tokens)?;
        if logits.shape() != f.logits.shape() {
            return Err(Error::Shape(format!(
                "fixture logits {:?} vs model {:?}",
                f.logits.shape(),
                logits.shape()
            )));
        }
        for (a, b) in logits.data().iter().zip(f.logits.data()) {
            worst = worst.max((*a as f64 - *b as f64).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GPTConfig, GPTWeights};

    #[test]
    fn self_fixtures_match_exactly() {
        let cfg = GPTConfig {
            vocab_size: 10,
            block_size: 8,
            n_layer: 1,
            n_head: 2,
            n_embd: 8,
        };
        let m = GPTWeights::random(cfg, 4, 0.3, true, false).unwrap();
        let fixtures: Vec<LogitFixture> = [vec![1u16, 2, 3], vec![9, 0]]
            .into_iter()
            .map(|tokens| {
                let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
                LogitFixture {
                    logits: m.forward(&ids).unwrap(),
                    tokens,
                }
            })
            .collect();
        let bytes = encode_fixtures(&fixtures);
        let back = decode_fixtures(&bytes, 10).unwrap();
        assert_eq!(back, fixtures);
        assert_eq!(max_fixture_deviation(&m, &back).unwrap(), 0.0);
        assert!(decode_fixtures(&bytes, 11).is_err());
    }

    #[test]
    fn empty_prompt_rejected() {
        let mut bytes = 1u32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert!(decode_fixtures(&bytes, 4).is_err());
    }
}
