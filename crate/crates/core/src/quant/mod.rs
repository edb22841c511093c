//! Quantization codecs and calibration observers.
//!
//! Three conversions are supported, all with a single scale per tensor:
//!
//! | scheme    | code                                   |
//! |-----------|----------------------------------------|
//! | symmetric | `round(x / scale)`                     |
//! | affine    | `round(x / scale) + zero_point`        |
//! | PoT       | `sign(x) * 2^clip(round(log2(|x| / scale)))` |
//!
//! Rounding is half-to-even throughout. The PoT codec reserves an explicit
//! zero code for magnitudes below half of the smallest power level.

mod observer;
mod pot;
mod uniform;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use observer::{compute_params, Observer, EPSILON_FLOOR};
pub use pot::{
    pot_dequantize, pot_quantize, pot_storage_bits, pot_storage_bits_folded, PoTCode, PoTWeight,
};
pub use uniform::{dequantize, quantize, quantize_affine, quantize_symmetric, QTensor};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 32;

/// Exponent bounds accepted by [`PoTConfig`]; keeps `2^e * scale` inside f32 range.
pub const MIN_EXPONENT: i32 = -126;
pub const MAX_EXPONENT: i32 = 127;

/// Parameters of the power-of-two codec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoTConfig {
    pub e_min: i32,
    pub e_max: i32,
    /// Magnitudes below `ratio * 2^e_min` (in units of scale) become zero.
    pub zero_threshold_ratio: f64,
    /// Lower clamp applied to the argument of the logarithm.
    pub epsilon: f64,
}

impl PoTConfig {
    pub const DEFAULT_ZERO_THRESHOLD_RATIO: f64 = 0.5;
    pub const DEFAULT_EPSILON: f64 = 1e-12;

    pub fn new(e_min: i32, e_max: i32) -> Result<Self> {
        let cfg = Self {
            e_min,
            e_max,
            zero_threshold_ratio: Self::DEFAULT_ZERO_THRESHOLD_RATIO,
            epsilon: Self::DEFAULT_EPSILON,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        self.epsilon = epsilon;
        self.validate()?;
        Ok(self)
    }

    pub fn with_zero_threshold_ratio(mut self, ratio: f64) -> Result<Self> {
        self.zero_threshold_ratio = ratio;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.e_min > self.e_max {
            return Err(Error::InvalidScheme(format!(
                "e_min {} exceeds e_max {}",
                self.e_min, self.e_max
            )));
        }
        if self.e_min < MIN_EXPONENT || self.e_max > MAX_EXPONENT {
            return Err(Error::InvalidScheme(format!(
                "exponents must lie in [{MIN_EXPONENT}, {MAX_EXPONENT}], got [{}, {}]",
                self.e_min, self.e_max
            )));
        }
        if !(self.zero_threshold_ratio > 0.0 && self.zero_threshold_ratio <= 1.0) {
            return Err(Error::InvalidScheme(format!(
                "zero threshold ratio must be in (0, 1], got {}",
                self.zero_threshold_ratio
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidScheme(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Number of distinct exponents, `e_max - e_min + 1`.
    pub fn levels(&self) -> u32 {
        (self.e_max - self.e_min + 1) as u32
    }

    /// Left-shift distance of the largest level relative to the smallest.
    pub fn shift_span(&self) -> u32 {
        (self.e_max - self.e_min) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum QScheme {
    Symmetric { bits: u32 },
    Affine { bits: u32 },
    PoT(PoTConfig),
}

impl QScheme {
    pub fn validate(&self) -> Result<()> {
        match self {
            QScheme::Symmetric { bits } | QScheme::Affine { bits } => {
                if !(MIN_BITS..=MAX_BITS).contains(bits) {
                    return Err(Error::InvalidScheme(format!(
                        "bit width {bits} outside {MIN_BITS}..={MAX_BITS}"
                    )));
                }
                Ok(())
            }
            QScheme::PoT(cfg) => cfg.validate(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            QScheme::Symmetric { .. } => "symmetric",
            QScheme::Affine { .. } => "affine",
            QScheme::PoT(_) => "pot",
        }
    }

    /// Storage cost per element in bits.
    pub fn storage_bits(&self) -> u32 {
        match self {
            QScheme::Symmetric { bits } | QScheme::Affine { bits } => *bits,
            QScheme::PoT(cfg) => pot_storage_bits(cfg),
        }
    }

    /// Inclusive integer code range for the uniform schemes.
    pub fn int_range(&self) -> Option<(i64, i64)> {
        match *self {
            QScheme::Symmetric { bits } => {
                let hi = (1i64 << (bits - 1)) - 1;
                Some((-hi, hi))
            }
            QScheme::Affine { bits } => {
                let half = 1i64 << (bits - 1);
                Some((-half, half - 1))
            }
            QScheme::PoT(_) => None,
        }
    }
}

impl fmt::Display for QScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QScheme::Symmetric { bits } => write!(f, "sym:{bits}"),
            QScheme::Affine { bits } => write!(f, "affine:{bits}"),
            QScheme::PoT(cfg) => {
                write!(f, "pot:e{}..{}", cfg.e_min, cfg.e_max)?;
                if cfg.epsilon != PoTConfig::DEFAULT_EPSILON {
                    write!(f, ",eps={:e}", cfg.epsilon)?;
                }
                if cfg.zero_threshold_ratio != PoTConfig::DEFAULT_ZERO_THRESHOLD_RATIO {
                    write!(f, ",ztr={}", cfg.zero_threshold_ratio)?;
                }
                Ok(())
            }
        }
    }
}

/// Scale and zero point for one quantization site.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scheme: QScheme,
    pub scale: f64,
    pub zero_point: i64,
}

impl QuantParams {
    pub fn new(scheme: QScheme, scale: f64, zero_point: i64) -> Result<Self> {
        let p = Self {
            scheme,
            scale,
            zero_point,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.scheme.validate()?;
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidScheme(format!(
                "scale must be positive and finite, got {}",
                self.scale
            )));
        }
        match self.scheme {
            QScheme::Affine { .. } => {
                let (lo, hi) = self.scheme.int_range().expect("uniform scheme");
                if !(lo..=hi).contains(&self.zero_point) {
                    return Err(Error::InvalidScheme(format!(
                        "zero point {} outside [{lo}, {hi}]",
                        self.zero_point
                    )));
                }
            }
            _ if self.zero_point != 0 => {
                return Err(Error::InvalidScheme(format!(
                    "{} scheme requires zero point 0, got {}",
                    self.scheme.kind_name(),
                    self.zero_point
                )));
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bits_out_of_range_rejected() {
        assert!(QScheme::Symmetric { bits: 1 }.validate().is_err());
        assert!(QScheme::Affine { bits: 33 }.validate().is_err());
        assert!(QScheme::Symmetric { bits: 32 }.validate().is_ok());
    }

    #[test]
    fn pot_config_invariants() {
        assert!(PoTConfig::new(3, 2).is_err());
        assert!(PoTConfig::new(0, 0).is_ok());
        assert!(PoTConfig::new(0, 4).unwrap().with_epsilon(0.0).is_err());
        assert!(PoTConfig::new(0, 4)
            .unwrap()
            .with_zero_threshold_ratio(1.5)
            .is_err());
        assert_eq!(PoTConfig::new(-2, 4).unwrap().levels(), 7);
    }

    #[test]
    fn params_zero_point_rules() {
        let sym = QScheme::Symmetric { bits: 8 };
        assert!(QuantParams::new(sym, 0.1, 1).is_err());
        assert!(QuantParams::new(sym, 0.0, 0).is_err());
        let aff = QScheme::Affine { bits: 8 };
        assert!(QuantParams::new(aff, 0.1, -128).is_ok());
        assert!(QuantParams::new(aff, 0.1, 128).is_err());
    }

    #[test]
    fn int_ranges() {
        assert_eq!(
            QScheme::Symmetric { bits: 8 }.int_range(),
            Some((-127, 127))
        );
        assert_eq!(QScheme::Affine { bits: 8 }.int_range(), Some((-128, 127)));
        assert_eq!(
            QScheme::Symmetric { bits: 32 }.int_range(),
            Some((-(i32::MAX as i64), i32::MAX as i64))
        );
    }
}
