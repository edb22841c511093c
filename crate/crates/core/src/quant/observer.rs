use serde::{Deserialize, Serialize};

use super::{QScheme, QuantParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower bound on the calibrated range so all-zero tensors still get a usable scale.
pub const EPSILON_FLOOR: f64 = 1e-10;

/// Running min/max observer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observer {
    pub seen_min: f32,
    pub seen_max: f32,
    pub count: u64,
}

impl Default for Observer {
    fn default() -> Self {
        Self::new()
    }
}

impl Observer {
    pub fn new() -> Self {
        Self {
            seen_min: f32::INFINITY,
            seen_max: f32::NEG_INFINITY,
            count: 0,
        }
    }

    /// Returns the observer extended by every element of `x`.
    pub fn observe(&self, x: &Tensor) -> Result<Observer> {
        let mut next = *self;
        next.update(x.data())?;
        Ok(next)
    }

    pub fn update(&mut self, values: &[f32]) -> Result<()> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "observer input",
                index,
                value: values[index],
            });
        }
        for &v in values {
            self.seen_min = self.seen_min.min(v);
            self.seen_max = self.seen_max.max(v);
        }
        self.count += values.len() as u64;
        Ok(())
    }

    pub fn merge(&self, other: &Observer) -> Observer {
        Observer {
            seen_min: self.seen_min.min(other.seen_min),
            seen_max: self.seen_max.max(other.seen_max),
            count: self.count + other.count,
        }
    }

    pub fn is_calibrated(&self) -> bool {
        self.count > 0
    }

    pub fn abs_max(&self) -> f32 {
        self.seen_min.abs().max(self.seen_max.abs())
    }
}

/// Derives scale and zero point for `scheme` from a calibrated observer.
///
/// The affine range is widened to include 0.0 so that zero always has an
/// exact code. The PoT scale places the observed absolute maximum on the
/// top power level and is rounded to an f32-representable value, which keeps
/// every dequantized PoT value an exact f32.
pub fn compute_params(obs: &Observer, scheme: QScheme) -> Result<QuantParams> {
    scheme.validate()?;
    if !obs.is_calibrated() {
        return Err(Error::Uncalibrated(None));
    }
    let lo = obs.seen_min as f64;
    let hi = obs.seen_max as f64;
    match scheme {
        QScheme::Symmetric { bits } => {
            let qmax = ((1u64 << (bits - 1)) - 1) as f64;
            let absmax = lo.abs().max(hi.abs()).max(EPSILON_FLOOR);
            QuantParams::new(scheme, absmax / qmax, 0)
        }
        QScheme::Affine { bits } => {
            let lo = lo.min(0.0);
            let hi = hi.max(0.0);
            let levels = ((1u64 << bits) - 1) as f64;
            let scale = (hi - lo).max(EPSILON_FLOOR) / levels;
            let (qmin, qmax) = scheme.int_range().expect("uniform scheme");
            let zp = (-lo / scale).round_ties_even() as i64 + qmin;
            QuantParams::new(scheme, scale, zp.clamp(qmin, qmax))
        }
        QScheme::PoT(cfg) => {
            let absmax = lo.abs().max(hi.abs()).max(EPSILON_FLOOR);
            let scale = (absmax / 2f64.powi(cfg.e_max)) as f32;
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::InvalidScheme(format!(
                    "PoT scale for range {absmax} and e_max {} is not representable",
                    cfg.e_max
                )));
            }
            QuantParams::new(scheme, scale as f64, 0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::PoTConfig;

    fn obs(min: f32, max: f32, count: u64) -> Observer {
        Observer {
            seen_min: min,
            seen_max: max,
            count,
        }
    }

    #[test]
    fn observe_examples() {
        let o = Observer::new()
            .observe(&Tensor::from_slice(&[1.0, -2.0, 3.0]))
            .unwrap();
        assert_eq!(o, obs(-2.0, 3.0, 3));
        let o2 = o.observe(&Tensor::from_slice(&[0.0])).unwrap();
        assert_eq!(o2, obs(-2.0, 3.0, 4));
        let o3 = o.observe(&Tensor::from_slice(&[10.0])).unwrap();
        assert_eq!(o3, obs(-2.0, 10.0, 4));
    }

    #[test]
    fn observe_rejects_non_finite() {
        let err = Observer::new()
            .observe(&Tensor::from_slice(&[1.0, f32::INFINITY]))
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
    }

    #[test]
    fn uncalibrated_rejected() {
        let err = compute_params(&Observer::new(), QScheme::Symmetric { bits: 8 }).unwrap_err();
        assert!(matches!(err, Error::Uncalibrated(None)));
    }

    #[test]
    fn symmetric_params() {
        let p = compute_params(&obs(-1.0, 1.0, 2), QScheme::Symmetric { bits: 8 }).unwrap();
        assert_eq!(p.scale, 1.0 / 127.0);
        assert_eq!(p.zero_point, 0);
    }

    #[test]
    fn affine_params() {
        let p = compute_params(&obs(0.0, 10.0, 2), QScheme::Affine { bits: 8 }).unwrap();
        assert_eq!(p.scale, 10.0 / 255.0);
        assert_eq!(p.zero_point, -128);
    }

    #[test]
    fn affine_positive_only_range_keeps_zero_exact() {
        let p = compute_params(&obs(2.0, 6.0, 2), QScheme::Affine { bits: 8 }).unwrap();
        assert_eq!(p.zero_point, -128);
        assert_eq!(p.scale, 6.0 / 255.0);
    }

    #[test]
    fn pot_params() {
        let cfg = PoTConfig::new(0, 4).unwrap();
        let p = compute_params(&obs(-8.0, 8.0, 2), QScheme::PoT(cfg)).unwrap();
        assert_eq!(p.scale, 0.5);
        assert_eq!(p.zero_point, 0);
    }

    #[test]
    fn all_zero_calibration_uses_floor() {
        let p = compute_params(&obs(0.0, 0.0, 4), QScheme::Symmetric { bits: 8 }).unwrap();
        assert!(p.scale > 0.0);
        let p = compute_params(&obs(0.0, 0.0, 4), QScheme::Affine { bits: 8 }).unwrap();
        assert!(p.scale > 0.0);
        let p = compute_params(
            &obs(0.0, 0.0, 4),
            QScheme::PoT(PoTConfig::new(0, 4).unwrap()),
        )
        .unwrap();
        assert!(p.scale > 0.0);
    }
}
