use super::PoTConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One power-of-two code: zero, or `sign * 2^exponent` in units of scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PoTCode {
    pub is_zero: bool,
    pub sign: i8,
    pub exponent: i32,
}

impl PoTCode {
    pub const ZERO: PoTCode = PoTCode {
        is_zero: true,
        sign: 1,
        exponent: 0,
    };

    pub fn new(sign: i8, exponent: i32) -> Self {
        debug_assert!(sign == 1 || sign == -1);
        Self {
            is_zero: false,
            sign,
            exponent,
        }
    }

    /// Value in units of scale, computed exactly in f64.
    pub fn unit_value(&self) -> f64 {
        if self.is_zero {
            0.0
        } else {
            self.sign as f64 * 2f64.powi(self.exponent)
        }
    }
}

/// A tensor restricted to signed powers of two times a single scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PoTWeight {
    pub shape: Vec<usize>,
    pub scale: f32,
    pub config: PoTConfig,
    pub codes: Vec<PoTCode>,
}

impl PoTWeight {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn zero_count(&self) -> usize {
        self.codes.iter().filter(|c| c.is_zero).count()
    }

    /// Transposes the code matrix; used when a table doubles as an output projection.
    pub fn transposed(&self) -> Result<PoTWeight> {
        let (r, c) = match self.shape.as_slice() {
            [r, c] => (*r, *c),
            other => {
                return Err(Error::Shape(format!(
                    "cannot transpose PoT weight of shape {other:?}"
                )))
            }
        };
        let mut codes = vec![PoTCode::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                codes[j * r + i] = self.codes[i * c + j];
            }
        }
        Ok(PoTWeight {
            shape: vec![c, r],
            scale: self.scale,
            config: self.config,
            codes,
        })
    }
}

/// Restricts every element of `x` to `sign * 2^e * scale` with `e` in
/// `[e_min, e_max]`, or to an explicit zero below the threshold.
pub fn pot_quantize(x: &Tensor, scale: f32, cfg: &PoTConfig) -> Result<PoTWeight> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidScheme(format!(
            "PoT scale must be positive and finite, got {scale}"
        )));
    }
    cfg.validate()?;
    x.ensure_finite("PoT quantize input")?;

    let scale64 = scale as f64;
    let zero_below = cfg.zero_threshold_ratio * 2f64.powi(cfg.e_min);
    let codes = x
        .data()
        .iter()
        .map(|&v| {
            let r = (v as f64).abs() / scale64;
            if r < zero_below {
                return PoTCode::ZERO;
            }
            let e = r.max(cfg.epsilon).log2().round_ties_even();
            let e = (e as i64).clamp(cfg.e_min as i64, cfg.e_max as i64) as i32;
            PoTCode::new(if v < 0.0 { -1 } else { 1 }, e)
        })
        .collect();
    Ok(PoTWeight {
        shape: x.shape().to_vec(),
        scale,
        config: *cfg,
        codes,
    })
}

pub fn pot_dequantize(w: &PoTWeight) -> Tensor {
    let scale = w.scale as f64;
    let data = w
        .codes
        .iter()
        .map(|c| (c.unit_value() * scale) as f32)
        .collect();
    Tensor::new(w.shape.clone(), data).expect("PoT weight shape matches its codes")
}

fn ceil_log2(n: u64) -> u32 {
    n.next_power_of_two().trailing_zeros()
}

/// Bits per element with a reserved zero code: `1 + ceil(log2(levels + 1))`.
pub fn pot_storage_bits(cfg: &PoTConfig) -> u32 {
    1 + ceil_log2(cfg.levels() as u64 + 1)
}

/// Bits per element when zero shares the lowest exponent code: `1 + ceil(log2(levels))`.
pub fn pot_storage_bits_folded(cfg: &PoTConfig) -> u32 {
    1 + ceil_log2(cfg.levels() as u64)
}
