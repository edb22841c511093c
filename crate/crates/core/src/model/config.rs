use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of a GPT-style decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GPTConfig {
    pub vocab_size: usize,
    pub block_size: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub n_embd: usize,
}

impl GPTConfig {
    /// Character-level Shakespeare model; depth is a per-checkpoint choice.
    pub fn char_level(n_layer: usize) -> Self {
        Self {
            vocab_size: 65,
            block_size: 64,
            n_layer,
            n_head: 4,
            n_embd: 128,
        }
    }

    /// GPT-2 small (124M).
    pub fn gpt2() -> Self {
        Self {
            vocab_size: 50257,
            block_size: 1024,
            n_layer: 12,
            n_head: 12,
            n_embd: 768,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("block_size", self.block_size),
            ("n_layer", self.n_layer),
            ("n_head", self.n_head),
            ("n_embd", self.n_embd),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !self.n_embd.is_multiple_of(self.n_head) {
            return Err(Error::InvalidConfig(format!(
                "n_embd {} not divisible by n_head {}",
                self.n_embd, self.n_head
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.n_embd / self.n_head
    }

    /// Closed-form parameter counts of the architecture (weights only; the
    /// layer-norm row counts the two per-layer gain vectors).
    pub fn census(&self) -> ParamCensus {
        let (v, b, d) = (self.vocab_size, self.block_size, self.n_embd);
        ParamCensus {
            token_embedding: v * d,
            position_embedding: b * d,
            attention_per_layer: 4 * d * d,
            mlp_per_layer: 2 * (d * 4 * d),
            layernorm_per_layer: 2 * d,
            output_linear: d * v,
        }
    }
}

/// Per-component parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCensus {
    pub token_embedding: usize,
    pub position_embedding: usize,
    pub attention_per_layer: usize,
    pub mlp_per_layer: usize,
    pub layernorm_per_layer: usize,
    pub output_linear: usize,
}
