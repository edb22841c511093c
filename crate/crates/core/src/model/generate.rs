use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::forward::LanguageModel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub steps: usize,
    pub temperature: f32,
    pub top_k: usize,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn greedy(steps: usize) -> Self {
        Self {
            steps,
            temperature: 1.0,
            top_k: 1,
            seed: 0,
        }
    }
}

/// Appends `steps` tokens sampled from the top-k of `softmax(logits / T)`.
///
/// The context is the last `block_size` tokens. With `top_k == 1` this is
/// greedy decoding (lowest id wins ties) and the seed is irrelevant.
pub fn generate(
    model: &dyn LanguageModel,
    prompt: &[usize],
    sampling: &SamplingConfig,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::InvalidConfig("prompt must not be empty".into()));
    }
    if !(sampling.temperature > 0.0 && sampling.temperature.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {}",
            sampling.temperature
        )));
    }
    if sampling.top_k == 0 {
        return Err(Error::InvalidConfig("top_k must be at least 1".into()));
    }
    let block = model.config().block_size;
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let mut tokens = prompt.to_vec();
    for _ in 0..sampling.steps {
        let start = tokens.len().saturating_sub(block);
        let logits = model.forward(&tokens[start..])?;
        let last = logits.row(logits.num_rows() - 1);

        let mut order: Vec<usize> = (0..last.len()).collect();
        order.sort_by(|&a, &b| last[b].total_cmp(&last[a]).then(a.cmp(&b)));
        order.truncate(sampling.top_k);

        let next = if order.len() == 1 {
            order[0]
        } else {
            let t = sampling.temperature as f64;
            let max = last[order[0]] as f64 / t;
            let weights: Vec<f64> = order
                .iter()
                .map(|&i| (last[i] as f64 / t - max).exp())
                .collect();
            let dist = WeightedIndex::new(&weights)
                .map_err(|e| Error::Data(format!("sampling weights: {e}")))?;
            order[dist.sample(&mut rng)]
        };
        tokens.push(next);
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GPTConfig, GPTWeights};

    fn model() -> GPTWeights {
        let cfg = GPTConfig {
            vocab_size: 12,
            block_size: 6,
            n_layer: 1,
            n_head: 2,
            n_embd: 8,
        };
        GPTWeights::random(cfg, 11, 0.5, true, false).unwrap()
    }

    #[test]
    fn greedy_is_argmax_and_seed_free() {
        let m = model();
        let mut a = SamplingConfig::greedy(4);
        let out = generate(&m, &[3], &a).unwrap();
        a.seed = 99;
        assert_eq!(generate(&m, &[3], &a).unwrap(), out);
        let logits = m.forward(&[3]).unwrap();
        let argmax = (0..12)
            .max_by(|&x, &y| {
                logits.data()[x]
                    .total_cmp(&logits.data()[y])
                    .then(y.cmp(&x))
            })
            .unwrap();
        assert_eq!(out[1], argmax);
    }

    #[test]
    fn seeded_sampling_reproducible() {
        let m = model();
        let cfg = SamplingConfig {
            steps: 20,
            temperature: 1.3,
            top_k: 5,
            seed: 7,
        };
        let a = generate(&m, &[1, 2], &cfg).unwrap();
        assert_eq!(a, generate(&m, &[1, 2], &cfg).unwrap());
        assert_eq!(a.len(), 22);
        assert_eq!(&a[..2], &[1, 2]);
    }

    #[test]
    fn window_slides_past_block_size() {
        let m = model();
        let out = generate(&m, &[1, 2, 3, 4, 5, 6], &SamplingConfig::greedy(10)).unwrap();
        assert_eq!(out.len(), 16);
    }

    #[test]
    fn invalid_args() {
        let m = model();
        let mut c = SamplingConfig::greedy(1);
        assert!(generate(&m, &[], &c).is_err());
        c.top_k = 0;
        assert!(generate(&m, &[1], &c).is_err());
        c.top_k = 2;
        c.temperature = 0.0;
        assert!(generate(&m, &[1], &c).is_err());
    }
}
