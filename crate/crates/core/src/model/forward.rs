use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use super::config::GPTConfig;
use super::weights::{GPTWeights, LinearId};
use crate::error::{Error, Result};
use crate::kernels::{gelu, layernorm, linear_f32, OpCounter};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f32 = 1e-5;

/// Operation tallies gathered over one or more forward passes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpStats {
    /// Work done inside linear layers (projections, MLP, output head).
    pub linear: OpCounter,
    /// Multiplies a dense float execution of the same linear layers would need.
    pub dense_linear_macs: u64,
    /// Activation-by-activation attention products, always float.
    pub attention: OpCounter,
    pub tokens: u64,
    pub forwards: u64,
}

impl AddAssign for OpStats {
    fn add_assign(&mut self, rhs: Self) {
        self.linear += rhs.linear;
        self.dense_linear_macs += rhs.dense_linear_macs;
        self.attention += rhs.attention;
        self.tokens += rhs.tokens;
        self.forwards += rhs.forwards;
    }
}

/// Storage cost of the quantizable weights (linear weights and embedding tables).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageSummary {
    pub elements: u64,
    pub float_bits: u64,
    /// Bits with PoT zero codes reserved.
    pub quantized_bits: u64,
    /// Bits with PoT zero folded into the lowest exponent code.
    pub quantized_bits_folded: u64,
}

/// Anything that maps a token sequence to next-token logits.
pub trait LanguageModel: Sync {
    fn config(&self) -> &GPTConfig;

    /// Logits `[T, vocab]`, accumulating operation counts into `stats`.
    fn forward_counted(&self, tokens: &[usize], stats: &mut OpStats) -> Result<Tensor>;

    fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        self.forward_counted(tokens, &mut OpStats::default())
    }

    fn storage(&self) -> StorageSummary;
}

pub(crate) trait LinearExec {
    fn linear(&mut self, id: LinearId, x: &Tensor, stats: &mut OpStats) -> Result<Tensor>;
}

pub(crate) struct FloatExec<'a>(pub &'a GPTWeights);

impl LinearExec for FloatExec<'_> {
    fn linear(&mut self, id: LinearId, x: &Tensor, stats: &mut OpStats) -> Result<Tensor> {
        let lin = self.0.linear(id);
        linear_f32(x, &lin.weight, lin.bias.as_ref(), &mut stats.linear)
    }
}

pub(crate) fn check_tokens(config: &GPTConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Data("empty token sequence".into()));
    }
    if tokens.len() > config.block_size {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            block_size: config.block_size,
        });
    }
    if let Some(&token) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::TokenOutOfRange {
            token,
            vocab_size: config.vocab_size,
        });
    }
    Ok(())
}

fn add_in_place(x: &mut Tensor, y: &Tensor) {
    for (a, b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += *b;
    }
}

/// Causal multi-head self-attention over a packed `[T, 3d]` qkv matrix.
fn causal_attention(qkv: &Tensor, config: &GPTConfig, ops: &mut OpCounter) -> Tensor {
    let t_len = qkv.num_rows();
    let d = config.n_embd;
    let hd = config.head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let data = qkv.data();
    let row = |t: usize| &data[t * 3 * d..(t + 1) * 3 * d];
    let mut out = vec![0.0f32; t_len * d];
    let mut scores = vec![0.0f64; t_len];
    for h in 0..config.n_head {
        let off = h * hd;
        for t in 0..t_len {
            let q = &row(t)[off..off + hd];
            let mut max = f64::NEG_INFINITY;
            for (u, s) in scores.iter_mut().enumerate().take(t + 1) {
                let k = &row(u)[d + off..d + off + hd];
                let dot: f64 = q.iter().zip(k).map(|(&a, &b)| a as f64 * b as f64).sum();
                *s = dot * inv_sqrt;
                max = max.max(*s);
            }
            let mut denom = 0.0;
            for s in scores.iter_mut().take(t + 1) {
                *s = (*s - max).exp();
                denom += *s;
            }
            let mut acc = vec![0.0f64; hd];
            for (u, s) in scores.iter().enumerate().take(t + 1) {
                let p = s / denom;
                let v = &row(u)[2 * d + off..2 * d + off + hd];
                for (a, &vv) in acc.iter_mut().zip(v) {
                    *a += p * vv as f64;
                }
            }
            for (o, a) in out[t * d + off..t * d + off + hd].iter_mut().zip(&acc) {
                *o = *a as f32;
            }
            let visible = (t + 1) as u64;
            ops.multiplies += 2 * visible * hd as u64 + visible;
            ops.adds += 2 * visible * hd as u64;
        }
    }
    Tensor::new(vec![t_len, d], out).unwrap()
}

/// Runs the decoder, delegating every linear layer to `exec`.
pub(crate) fn run_forward(
    weights: &GPTWeights,
    tok_table: &Tensor,
    pos_table: &Tensor,
    exec: &mut dyn LinearExec,
    tokens: &[usize],
    stats: &mut OpStats,
) -> Result<Tensor> {
    let config = &weights.config;
    check_tokens(config, tokens)?;
    let d = config.n_embd;
    let t_len = tokens.len();

    let mut x = Tensor::zeros(vec![t_len, d]);
    for (t, (&tok, row)) in tokens.iter().zip(x.data_mut().chunks_mut(d)).enumerate() {
        for ((o, a), b) in row.iter_mut().zip(tok_table.row(tok)).zip(pos_table.row(t)) {
            *o = a + b;
        }
    }

    let mut linear = |id: LinearId, input: &Tensor, stats: &mut OpStats| -> Result<Tensor> {
        let (k, n) = weights.linear(id).weight.dims2()?;
        stats.dense_linear_macs += (t_len * k * n) as u64;
        exec.linear(id, input, stats)
    };

    for (layer, lw) in weights.layers.iter().enumerate() {
        use super::weights::LinearKind::*;
        let block = |kind| LinearId::Block { layer, kind };

        let h = layernorm(&x, &lw.ln1.gamma, &lw.ln1.beta, LAYERNORM_EPS)?;
        let qkv = linear(block(AttnQkv), &h, stats)?;
        let y = causal_attention(&qkv, config, &mut stats.attention);
        let a = linear(block(AttnProj), &y, stats)?;
        add_in_place(&mut x, &a);

        let h = layernorm(&x, &lw.ln2.gamma, &lw.ln2.beta, LAYERNORM_EPS)?;
        let up = linear(block(MlpUp), &h, stats)?;
        let down = linear(block(MlpDown), &gelu(&up), stats)?;
        add_in_place(&mut x, &down);
    }

    let h = layernorm(&x, &weights.ln_f.gamma, &weights.ln_f.beta, LAYERNORM_EPS)?;
    let logits = linear(LinearId::LmHead, &h, stats)?;
    stats.tokens += t_len as u64;
    stats.forwards += 1;
    Ok(logits)
}

impl LanguageModel for GPTWeights {
    fn config(&self) -> &GPTConfig {
        &self.config
    }

    fn forward_counted(&self, tokens: &[usize], stats: &mut OpStats) -> Result<Tensor> {
        run_forward(
            self,
            &self.tok_emb,
            &self.pos_emb,
            &mut FloatExec(self),
            tokens,
            stats,
        )
    }

    fn storage(&self) -> StorageSummary {
        let mut elements = (self.tok_emb.len() + self.pos_emb.len()) as u64;
        for l in &self.layers {
            for kind in super::weights::LinearKind::ALL {
                elements += l.linear(kind).weight.len() as u64;
            }
        }
        if !self.tied_lm_head {
            elements += self.lm_head.weight.len() as u64;
        }
        StorageSummary {
            elements,
            float_bits: 32 * elements,
            quantized_bits: 32 * elements,
            quantized_bits_folded: 32 * elements,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::matmul_f32;
    use crate::model::weights::{LayerNormWeights, LayerWeights, Linear};

    fn cfg() -> GPTConfig {
        GPTConfig {
            vocab_size: 5,
            block_size: 6,
            n_layer: 2,
            n_head: 2,
            n_embd: 4,
        }
    }

    #[test]
    fn shape_and_errors() {
        let w = GPTWeights::random(cfg(), 9, 0.3, true, false).unwrap();
        assert_eq!(w.forward(&[3]).unwrap().shape(), &[1, 5]);
        assert_eq!(w.forward(&[0, 1, 2, 3, 4, 0]).unwrap().shape(), &[6, 5]);
        assert!(matches!(
            w.forward(&[5]),
            Err(Error::TokenOutOfRange { token: 5, .. })
        ));
        assert!(matches!(
            w.forward(&[0; 7]),
            Err(Error::SequenceTooLong { len: 7, .. })
        ));
        assert!(w.forward(&[]).is_err());
    }

    #[test]
    fn prefix_property() {
        let w = GPTWeights::random(cfg(), 2, 0.3, true, false).unwrap();
        let full = w.forward(&[1, 4, 2, 0, 3]).unwrap();
        let prefix = w.forward(&[1, 4, 2]).unwrap();
        assert_eq!(&full.data()[..15], prefix.data());
    }

    #[test]
    fn deterministic() {
        let w = GPTWeights::random(cfg(), 2, 0.3, true, false).unwrap();
        assert_eq!(
            w.forward(&[1, 2, 3]).unwrap(),
            w.forward(&[1, 2, 3]).unwrap()
        );
    }

    /// With zero residual branches the logits reduce to
    /// `layernorm(tok_emb[t] + pos_emb[pos]) @ lm_head`.
    #[test]
    fn degenerate_model_by_hand() {
        let c = GPTConfig {
            vocab_size: 3,
            block_size: 2,
            n_layer: 1,
            n_head: 1,
            n_embd: 2,
        };
        let eye = |n: usize, m: usize| {
            let mut t = Tensor::zeros(vec![n, m]);
            for i in 0..n.min(m) {
                t.data_mut()[i * m + i] = 1.0;
            }
            t
        };
        let layer = LayerWeights {
            ln1: LayerNormWeights::identity(2),
            attn_qkv: Linear {
                weight: eye(2, 6),
                bias: None,
            },
            // attention output projection zeroed so the residual stream is untouched
            attn_proj: Linear {
                weight: Tensor::zeros(vec![2, 2]),
                bias: None,
            },
            ln2: LayerNormWeights::identity(2),
            mlp_up: Linear {
                weight: eye(2, 8),
                bias: None,
            },
            mlp_down: Linear {
                weight: Tensor::zeros(vec![8, 2]),
                bias: None,
            },
        };
        let tok_emb = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 2.0], &[3.0, 1.0]]).unwrap();
        let pos_emb = Tensor::from_rows(&[&[0.5, 0.0], &[0.0, 0.0]]).unwrap();
        let lm = Tensor::from_rows(&[&[1.0, 2.0, -1.0], &[0.0, 1.0, 1.0]]).unwrap();
        let w = GPTWeights {
            config: c,
            tok_emb,
            pos_emb,
            layers: vec![layer],
            ln_f: LayerNormWeights::identity(2),
            lm_head: Linear {
                weight: lm.clone(),
                bias: None,
            },
            tied_lm_head: false,
        };
        let logits = w.forward(&[2, 1]).unwrap();
        // position 0: [3.5, 1] -> normalized [1, -1]; position 1: [0, 2] -> [-1, 1]
        let s0 = (1.25 / (1.5625f64 + 1e-5).sqrt()) as f32;
        let s1 = (1.0 / (1.0f64 + 1e-5).sqrt()) as f32;
        let expected =
            matmul_f32(&Tensor::from_rows(&[&[s0, -s0], &[-s1, s1]]).unwrap(), &lm).unwrap();
        for (a, b) in logits.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        // hand values: [1,-1] @ lm = [1, 1, -2]
        assert!((logits.data()[0] - 1.0).abs() < 1e-4);
        assert!((logits.data()[2] + 2.0).abs() < 1e-4);
    }

    #[test]
    fn counts_dense_macs() {
        let w = GPTWeights::random(cfg(), 2, 0.3, false, false).unwrap();
        let mut stats = OpStats::default();
        w.forward_counted(&[1, 2, 3], &mut stats).unwrap();
        let d = 4u64;
        let per_layer = d * 3 * d + d * d + d * 4 * d + 4 * d * d;
        let expected = 3 * (2 * per_layer + d * 5);
        assert_eq!(stats.dense_linear_macs, expected);
        assert_eq!(stats.linear.multiplies, expected);
        assert_eq!(stats.linear.shifts, 0);
        assert_eq!(stats.tokens, 3);
    }
}
