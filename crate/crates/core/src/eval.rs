//! Cross-entropy, perplexity and the evaluation/sweep harness.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, TokenFile};
use crate::error::{Error, Result};
use crate::model::{
    op_report, GPTWeights, LanguageModel, OpReport, OpStats, QuantizedModel, SiteSummary,
};
use crate::qspec::QuantSpec;
use crate::tensor::Tensor;

/// Mean over positions of `-ln softmax(logits[t])[targets[t]]`, in nats.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let (t, k) = logits.dims2()?;
    if targets.len() != t {
        return Err(Error::Shape(format!(
            "{} targets for {t} logit rows",
            targets.len()
        )));
    }
    if t == 0 {
        return Err(Error::Shape("cross entropy of zero positions".into()));
    }
    logits.ensure_finite("logits")?;
    let mut total = Neumaier::default();
    for (i, &y) in targets.iter().enumerate() {
        if y >= k {
            return Err(Error::TokenOutOfRange {
                token: y,
                vocab_size: k,
            });
        }
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        total.add(max + sum.ln() - row[y] as f64);
    }
    Ok(total.value() / t as f64)
}

pub fn perplexity(ce: f64) -> f64 {
    ce.exp()
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = Neumaier::default();
    xs.into_iter().for_each(|x| s.add(x));
    s.value()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalArgs {
    pub n_batches: usize,
    pub batch_size: usize,
    pub block_size: usize,
    pub seed: u64,
}

impl Default for EvalArgs {
    fn default() -> Self {
        Self {
            n_batches: 100,
            batch_size: 8,
            block_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Quantization spec in its textual form; `float` for an unquantized model.
    pub spec: String,
    pub ce_mean: f64,
    /// Sample standard deviation of the per-batch means.
    pub ce_std: f64,
    pub perplexity: f64,
    pub n_batches: usize,
    pub batch_size: usize,
    pub block_size: usize,
    pub seed: u64,
    pub sites: Vec<SiteSummary>,
    pub ops: OpReport,
}

/// Mean cross entropy over `n_batches` seeded batches of `split`.
///
/// Windows are drawn up front from one seeded sampler so batch contents do
/// not depend on scheduling; batches then run in parallel.
pub fn evaluate(
    model: &dyn LanguageModel,
    split: &TokenFile,
    args: &EvalArgs,
) -> Result<EvalReport> {
    if args.n_batches == 0 {
        return Err(Error::InvalidConfig("n_batches must be positive".into()));
    }
    let cfg = model.config();
    if args.block_size > cfg.block_size {
        return Err(Error::SequenceTooLong {
            len: args.block_size,
            block_size: cfg.block_size,
        });
    }
    if split.vocab_size as usize > cfg.vocab_size {
        return Err(Error::Data(format!(
            "token file vocabulary {} exceeds model vocabulary {}",
            split.vocab_size, cfg.vocab_size
        )));
    }
    let mut sampler = BatchSampler::new(args.seed);
    let batches = (0..args.n_batches)
        .map(|_| sampler.next_batch(split, args.block_size, args.batch_size))
        .collect::<Result<Vec<_>>>()?;

    let per_batch = batches
        .par_iter()
        .map(|b| {
            let mut stats = OpStats::default();
            let mut ces = Vec::with_capacity(b.inputs.len());
            for (x, y) in b.inputs.iter().zip(&b.targets) {
                let logits = model.forward_counted(x, &mut stats)?;
                ces.push(cross_entropy(&logits, y)?);
            }
            Ok((compensated_sum(ces) / b.inputs.len() as f64, stats))
        })
        .collect::<Result<Vec<(f64, OpStats)>>>()?;

    let n = per_batch.len() as f64;
    let ce_mean = compensated_sum(per_batch.iter().map(|p| p.0)) / n;
    let ce_std = if per_batch.len() > 1 {
        (compensated_sum(per_batch.iter().map(|p| (p.0 - ce_mean).powi(2))) / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut stats = OpStats::default();
    for (_, s) in &per_batch {
        stats += *s;
    }
    Ok(EvalReport {
        spec: QuantSpec::float().to_string(),
        ce_mean,
        ce_std,
        perplexity: perplexity(ce_mean),
        n_batches: args.n_batches,
        batch_size: args.batch_size,
        block_size: args.block_size,
        seed: args.seed,
        sites: Vec::new(),
        ops: op_report(model, &stats)?,
    })
}

/// [`evaluate`] plus the model's spec and per-site summaries.
pub fn evaluate_quantized(
    model: &QuantizedModel,
    split: &TokenFile,
    args: &EvalArgs,
) -> Result<EvalReport> {
    let mut report = evaluate(model, split, args)?;
    report.spec = model.spec().to_string();
    report.sites = model.site_summaries();
    Ok(report)
}

/// Seeded calibration sequences of length `block` drawn from `split`.
pub fn calibration_batches(
    split: &TokenFile,
    n: usize,
    block: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    Ok(BatchSampler::new(seed).next_batch(split, block, n)?.inputs)
}

#[derive(Debug)]
pub struct SweepRow {
    pub spec: String,
    pub outcome: Result<EvalReport>,
}

/// Evaluates each spec with the same seed so rows are paired comparisons.
/// A failing spec is recorded in its row and the sweep moves on.
pub fn sweep(
    weights: &GPTWeights,
    specs: &[QuantSpec],
    calibration: &[Vec<usize>],
    split: &TokenFile,
    args: &EvalArgs,
) -> Result<Vec<SweepRow>> {
    if specs.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one spec".into()));
    }
    Ok(specs
        .iter()
        .map(|spec| SweepRow {
            spec: spec.to_string(),
            outcome: QuantizedModel::build(weights, spec, calibration)
                .and_then(|m| evaluate_quantized(&m, split, args)),
        })
        .collect())
}

/// Fixed-width table, one row per spec.
pub fn format_table(rows: &[SweepRow]) -> String {
    let width = rows.iter().map(|r| r.spec.len()).max().unwrap_or(0).max(4);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>10}  {:>8}  {:>8}\n",
        "spec", "ce", "ce_std", "perplexity", "mem_x", "cycle_x"
    );
    for r in rows {
        match &r.outcome {
            Ok(rep) => {
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>8.4}  {:>8.4}  {:>10.3}  {:>8.3}  {:>8.3}",
                    r.spec,
                    rep.ce_mean,
                    rep.ce_std,
                    rep.perplexity,
                    rep.ops.memory_factor,
                    rep.ops.cycle_reduction
                );
            }
            Err(e) => {
                let _ = writeln!(out, "{:<width$}  error: {e}", r.spec);
            }
        }
    }
    out
}

/// One JSON object per line for every successful row.
pub fn to_jsonl<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> Result<String> {
    let mut out = String::new();
    for r in reports {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}
