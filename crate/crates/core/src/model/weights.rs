use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{GPTConfig, ParamCensus};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The four linear projections inside a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinearKind {
    AttnQkv,
    AttnProj,
    MlpUp,
    MlpDown,
}

impl LinearKind {
    pub const ALL: [LinearKind; 4] = [
        LinearKind::AttnQkv,
        LinearKind::AttnProj,
        LinearKind::MlpUp,
        LinearKind::MlpDown,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LinearKind::AttnQkv => "attn_qkv",
            LinearKind::AttnProj => "attn_proj",
            LinearKind::MlpUp => "mlp_up",
            LinearKind::MlpDown => "mlp_down",
        }
    }

    /// `(in, out)` feature counts for a model width.
    pub fn dims(&self, n_embd: usize) -> (usize, usize) {
        match self {
            LinearKind::AttnQkv => (n_embd, 3 * n_embd),
            LinearKind::AttnProj => (n_embd, n_embd),
            LinearKind::MlpUp => (n_embd, 4 * n_embd),
            LinearKind::MlpDown => (4 * n_embd, n_embd),
        }
    }
}

/// Identifies one linear layer of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinearId {
    Block { layer: usize, kind: LinearKind },
    LmHead,
}

impl LinearId {
    /// Every linear in forward order.
    pub fn all(n_layer: usize) -> Vec<LinearId> {
        let mut ids: Vec<LinearId> = (0..n_layer)
            .flat_map(|layer| {
                LinearKind::ALL
                    .iter()
                    .map(move |&kind| LinearId::Block { layer, kind })
            })
            .collect();
        ids.push(LinearId::LmHead);
        ids
    }

    /// Dense index in `0..=4 * n_layer`, matching [`LinearId::all`].
    pub fn index(&self, n_layer: usize) -> usize {
        match *self {
            LinearId::Block { layer, kind } => {
                layer * 4 + LinearKind::ALL.iter().position(|k| *k == kind).unwrap()
            }
            LinearId::LmHead => 4 * n_layer,
        }
    }

    /// Stable site name, e.g. `layer0.attn_qkv` or `lm_head`.
    pub fn site_name(&self) -> String {
        match self {
            LinearId::Block { layer, kind } => format!("layer{layer}.{}", kind.as_str()),
            LinearId::LmHead => "lm_head".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormWeights {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            beta: Tensor::zeros(vec![d]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in, out]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1: LayerNormWeights,
    pub attn_qkv: Linear,
    pub attn_proj: Linear,
    pub ln2: LayerNormWeights,
    pub mlp_up: Linear,
    pub mlp_down: Linear,
}

impl LayerWeights {
    pub fn linear(&self, kind: LinearKind) -> &Linear {
        match kind {
            LinearKind::AttnQkv => &self.attn_qkv,
            LinearKind::AttnProj => &self.attn_proj,
            LinearKind::MlpUp => &self.mlp_up,
            LinearKind::MlpDown => &self.mlp_down,
        }
    }

    pub fn linear_mut(&mut self, kind: LinearKind) -> &mut Linear {
        match kind {
            LinearKind::AttnQkv => &mut self.attn_qkv,
            LinearKind::AttnProj => &mut self.attn_proj,
            LinearKind::MlpUp => &mut self.mlp_up,
            LinearKind::MlpDown => &mut self.mlp_down,
        }
    }
}

/// Named float weights of the decoder.
///
/// When `tied_lm_head` is set, `lm_head.weight` is the transpose of
/// `tok_emb` and is not stored separately in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct GPTWeights {
    pub config: GPTConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub ln_f: LayerNormWeights,
    pub lm_head: Linear,
    pub tied_lm_head: bool,
}

impl GPTWeights {
    pub fn linear(&self, id: LinearId) -> &Linear {
        match id {
            LinearId::Block { layer, kind } => self.layers[layer].linear(kind),
            LinearId::LmHead => &self.lm_head,
        }
    }

    pub fn linear_mut(&mut self, id: LinearId) -> &mut Linear {
        match id {
            LinearId::Block { layer, kind } => self.layers[layer].linear_mut(kind),
            LinearId::LmHead => &mut self.lm_head,
        }
    }

    /// Re-derives the tied output projection after `tok_emb` changes.
    pub fn retie(&mut self) -> Result<()> {
        if self.tied_lm_head {
            self.lm_head.weight = self.tok_emb.transpose2d()?;
        }
        Ok(())
    }

    /// Gaussian-initialised weights (std `init_std`, residual projections
    /// scaled by `1/sqrt(2 n_layer)`), deterministic per seed.
    pub fn random(
        config: GPTConfig,
        seed: u64,
        init_std: f32,
        with_bias: bool,
        tied: bool,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, init_std)
            .map_err(|e| Error::InvalidConfig(format!("init std {init_std}: {e}")))?;
        let mut gauss = |shape: Vec<usize>, std_mul: f32| -> Tensor {
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng) * std_mul).collect();
            Tensor::new(shape, data).unwrap()
        };
        let d = config.n_embd;
        let resid = 1.0 / ((2 * config.n_layer) as f32).sqrt();
        let tok_emb = gauss(vec![config.vocab_size, d], 1.0);
        let pos_emb = gauss(vec![config.block_size, d], 1.0);
        let mut layers = Vec::with_capacity(config.n_layer);
        for _ in 0..config.n_layer {
            let make = |kind: LinearKind, gauss: &mut dyn FnMut(Vec<usize>, f32) -> Tensor| {
                let (i, o) = kind.dims(d);
                let mul = if matches!(kind, LinearKind::AttnProj | LinearKind::MlpDown) {
                    resid
                } else {
                    1.0
                };
                Linear {
                    weight: gauss(vec![i, o], mul),
                    bias: with_bias.then(|| gauss(vec![o], 0.1)),
                }
            };
            layers.push(LayerWeights {
                ln1: LayerNormWeights::identity(d),
                attn_qkv: make(LinearKind::AttnQkv, &mut gauss),
                attn_proj: make(LinearKind::AttnProj, &mut gauss),
                ln2: LayerNormWeights::identity(d),
                mlp_up: make(LinearKind::MlpUp, &mut gauss),
                mlp_down: make(LinearKind::MlpDown, &mut gauss),
            });
        }
        let lm_head = if tied {
            Linear {
                weight: tok_emb.transpose2d()?,
                bias: None,
            }
        } else {
            Linear {
                weight: gauss(vec![d, config.vocab_size], 1.0),
                bias: None,
            }
        };
        let w = Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            ln_f: LayerNormWeights::identity(d),
            lm_head,
            tied_lm_head: tied,
        };
        w.validate()?;
        Ok(w)
    }

    /// Checks every tensor against the shapes implied by `config`.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.n_embd;
        let expect = |name: &str, t: &Tensor, shape: &[usize]| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        expect("tok_emb", &self.tok_emb, &[c.vocab_size, d])?;
        expect("pos_emb", &self.pos_emb, &[c.block_size, d])?;
        if self.layers.len() != c.n_layer {
            return Err(Error::Shape(format!(
                "expected {} layers, found {}",
                c.n_layer,
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (tag, ln) in [("ln1", &layer.ln1), ("ln2", &layer.ln2)] {
                expect(&format!("layer{i}.{tag}.gamma"), &ln.gamma, &[d])?;
                expect(&format!("layer{i}.{tag}.beta"), &ln.beta, &[d])?;
            }
            for kind in LinearKind::ALL {
                let (fan_in, fan_out) = kind.dims(d);
                let lin = layer.linear(kind);
                let name = format!("layer{i}.{}", kind.as_str());
                expect(&format!("{name}.weight"), &lin.weight, &[fan_in, fan_out])?;
                if let Some(b) = &lin.bias {
                    expect(&format!("{name}.bias"), b, &[fan_out])?;
                }
            }
        }
        expect("ln_f.gamma", &self.ln_f.gamma, &[d])?;
        expect("ln_f.beta", &self.ln_f.beta, &[d])?;
        expect("lm_head.weight", &self.lm_head.weight, &[d, c.vocab_size])?;
        if let Some(b) = &self.lm_head.bias {
            expect("lm_head.bias", b, &[c.vocab_size])?;
        }
        Ok(())
    }

    /// Parameter counts measured from the tensors themselves.
    pub fn census(&self) -> ParamCensus {
        let first = self.layers.first();
        let layer_sum = |f: &dyn Fn(&LayerWeights) -> usize| first.map_or(0, f);
        ParamCensus {
            token_embedding: self.tok_emb.len(),
            position_embedding: self.pos_emb.len(),
            attention_per_layer: layer_sum(&|l| l.attn_qkv.weight.len() + l.attn_proj.weight.len()),
            mlp_per_layer: layer_sum(&|l| l.mlp_up.weight.len() + l.mlp_down.weight.len()),
            layernorm_per_layer: layer_sum(&|l| l.ln1.gamma.len() + l.ln2.gamma.len()),
            output_linear: self.lm_head.weight.len(),
        }
    }

    /// Total stored parameters (the tied head counted once).
    pub fn param_count(&self) -> usize {
        let mut n = self.tok_emb.len() + self.pos_emb.len();
        for l in &self.layers {
            n += l.ln1.gamma.len() + l.ln1.beta.len() + l.ln2.gamma.len() + l.ln2.beta.len();
            for kind in LinearKind::ALL {
                let lin = l.linear(kind);
                n += lin.weight.len() + lin.bias.as_ref().map_or(0, Tensor::len);
            }
        }
        n += self.ln_f.gamma.len() + self.ln_f.beta.len();
        if !self.tied_lm_head {
            n += self.lm_head.weight.len();
        }
        n + self.lm_head.bias.as_ref().map_or(0, Tensor::len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_ids_are_dense() {
        let ids = LinearId::all(3);
        assert_eq!(ids.len(), 13);
        for (i, id) in ids.iter().enumerate() {
            assert_eq!(id.index(3), i);
        }
        assert_eq!(ids[5].site_name(), "layer1.attn_proj");
        assert_eq!(ids[12].site_name(), "lm_head");
    }

    #[test]
    fn random_weights_match_census() {
        let cfg = GPTConfig::char_level(2);
        let w = GPTWeights::random(cfg, 3, 0.02, true, false).unwrap();
        assert_eq!(w.census(), cfg.census());
        let w2 = GPTWeights::random(cfg, 3, 0.02, true, false).unwrap();
        assert_eq!(w, w2);
    }

    #[test]
    fn tied_head_is_transpose() {
        let cfg = GPTConfig {
            vocab_size: 7,
            block_size: 4,
            n_layer: 1,
            n_head: 2,
            n_embd: 4,
        };
        let w = GPTWeights::random(cfg, 1, 0.5, false, true).unwrap();
        assert_eq!(w.lm_head.weight, w.tok_emb.transpose2d().unwrap());
        let untied = GPTWeights::random(cfg, 1, 0.5, false, false).unwrap();
        assert_eq!(untied.param_count(), w.param_count() + 28);
    }

    #[test]
    fn validate_catches_bad_shape() {
        let cfg = GPTConfig::char_level(1);
        let mut w = GPTWeights::random(cfg, 0, 0.02, false, false).unwrap();
        w.layers[0].mlp_up.weight = Tensor::zeros(vec![128, 128]);
        let err = w.validate().unwrap_err().to_string();
        assert!(err.contains("layer0.mlp_up.weight"), "{err}");
    }
}
