//! Operation and memory accounting.
//!
//! The cycle model weighs a multiply as five cycles and a shift as one.
//! Ratios are kept as exact integer fractions alongside their float values.

use serde::{Deserialize, Serialize};

use super::forward::{LanguageModel, OpStats, StorageSummary};
use crate::error::{Error, Result};
use crate::kernels::OpCounter;

pub const MULTIPLY_CYCLES: u64 = 5;
pub const SHIFT_CYCLES: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub tokens: u64,
    pub forwards: u64,
    pub linear: OpCounter,
    pub attention: OpCounter,
    /// Multiplies a float execution of the same linear layers performs.
    pub dense_linear_macs: u64,
    pub storage: StorageSummary,
    pub float_weight_bytes: u64,
    pub quantized_weight_bytes: u64,
    /// `float_bits / quantized_bits` with reserved PoT zero codes.
    pub memory_factor: f64,
    /// Same, with PoT zero folded into the lowest exponent code.
    pub memory_factor_folded: f64,
    /// `MULTIPLY_CYCLES * multiplies + SHIFT_CYCLES * shifts` over linear layers.
    pub cycle_cost: u64,
    /// `MULTIPLY_CYCLES * dense_linear_macs`.
    pub cycle_cost_float: u64,
    /// `cycle_cost / cycle_cost_float`.
    pub cycle_ratio: f64,
    /// `cycle_cost_float / cycle_cost`: how many times cheaper than float.
    pub cycle_reduction: f64,
}

impl OpReport {
    /// Exact test of `lo <= cycle_reduction <= hi` for integer bounds.
    pub fn cycle_reduction_within(&self, lo: u64, hi: u64) -> bool {
        let (num, den) = (self.cycle_cost_float as u128, self.cycle_cost as u128);
        den > 0 && num >= lo as u128 * den && num <= hi as u128 * den
    }

    /// Exact test of `memory_factor == factor`.
    pub fn memory_factor_is(&self, factor: u64) -> bool {
        self.storage.quantized_bits > 0
            && self.storage.float_bits as u128
                == factor as u128 * self.storage.quantized_bits as u128
    }
}

/// Builds the accounting for `model` from counters recorded during forward passes.
pub fn op_report(model: &dyn LanguageModel, stats: &OpStats) -> Result<OpReport> {
    if stats.forwards == 0 {
        return Err(Error::Data(
            "operation report needs at least one recorded forward pass".into(),
        ));
    }
    let storage = model.storage();
    let cycle_cost = MULTIPLY_CYCLES * stats.linear.multiplies + SHIFT_CYCLES * stats.linear.shifts;
    let cycle_cost_float = MULTIPLY_CYCLES * stats.dense_linear_macs;
    let ratio = |a: u64, b: u64| {
        if b == 0 {
            f64::NAN
        } else {
            a as f64 / b as f64
        }
    };
    Ok(OpReport {
        tokens: stats.tokens,
        forwards: stats.forwards,
        linear: stats.linear,
        attention: stats.attention,
        dense_linear_macs: stats.dense_linear_macs,
        storage,
        float_weight_bytes: storage.float_bits.div_ceil(8),
        quantized_weight_bytes: storage.quantized_bits.div_ceil(8),
        memory_factor: ratio(storage.float_bits, storage.quantized_bits),
        memory_factor_folded: ratio(storage.float_bits, storage.quantized_bits_folded),
        cycle_cost,
        cycle_cost_float,
        cycle_ratio: ratio(cycle_cost, cycle_cost_float),
        cycle_reduction: ratio(cycle_cost_float, cycle_cost),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GPTConfig, GPTWeights};

    #[test]
    fn float_model_has_unit_factors() {
        let w = GPTWeights::random(GPTConfig::char_level(1), 0, 0.02, false, false).unwrap();
        let mut stats = OpStats::default();
        w.forward_counted(&[1, 2, 3, 4], &mut stats).unwrap();
        let r = op_report(&w, &stats).unwrap();
        assert_eq!(r.linear.shifts, 0);
        assert_eq!(r.memory_factor, 1.0);
        assert_eq!(r.cycle_ratio, 1.0);
        assert!(r.cycle_reduction_within(1, 1));
        assert!(r.memory_factor_is(1));
    }

    #[test]
    fn requires_a_forward() {
        let w = GPTWeights::random(GPTConfig::char_level(1), 0, 0.02, false, false).unwrap();
        assert!(op_report(&w, &OpStats::default()).is_err());
    }
}
