use super::{QScheme, QuantParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer codes produced by the symmetric or affine codec.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub shape: Vec<usize>,
    pub values: Vec<i32>,
    pub params: QuantParams,
}

impl QTensor {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn bits(&self) -> u32 {
        match self.params.scheme {
            QScheme::Symmetric { bits } | QScheme::Affine { bits } => bits,
            QScheme::PoT(_) => unreachable!("QTensor never carries PoT params"),
        }
    }
}

fn quantize_uniform(x: &Tensor, p: &QuantParams) -> Result<QTensor> {
    x.ensure_finite("quantize input")?;
    p.validate()?;
    let (lo, hi) = p.scheme.int_range().expect("uniform scheme");
    let values = x
        .data()
        .iter()
        .map(|&v| {
            let q = (v as f64 / p.scale).round_ties_even() as i64 + p.zero_point;
            q.clamp(lo, hi) as i32
        })
        .collect();
    Ok(QTensor {
        shape: x.shape().to_vec(),
        values,
        params: *p,
    })
}

/// `clamp(round(x / scale))` into the symmetric range of the bit width.
pub fn quantize_symmetric(x: &Tensor, p: &QuantParams) -> Result<QTensor> {
    if !matches!(p.scheme, QScheme::Symmetric { .. }) {
        return Err(Error::WrongScheme {
            expected: "symmetric",
            got: p.scheme.to_string(),
        });
    }
    quantize_uniform(x, p)
}

/// `clamp(round(x / scale) + zero_point)` into the signed range of the bit width.
pub fn quantize_affine(x: &Tensor, p: &QuantParams) -> Result<QTensor> {
    if !matches!(p.scheme, QScheme::Affine { .. }) {
        return Err(Error::WrongScheme {
            expected: "affine",
            got: p.scheme.to_string(),
        });
    }
    quantize_uniform(x, p)
}

/// Dispatches to the symmetric or affine codec.
pub fn quantize(x: &Tensor, p: &QuantParams) -> Result<QTensor> {
    match p.scheme {
        QScheme::Symmetric { .. } => quantize_symmetric(x, p),
        QScheme::Affine { .. } => quantize_affine(x, p),
        QScheme::PoT(_) => Err(Error::WrongScheme {
            expected: "symmetric or affine",
            got: p.scheme.to_string(),
        }),
    }
}

pub fn dequantize(q: &QTensor) -> Tensor {
    let zp = q.params.zero_point;
    let scale = q.params.scale;
    let data = q
        .values
        .iter()
        .map(|&v| ((v as i64 - zp) as f64 * scale) as f32)
        .collect();
    Tensor::new(q.shape.clone(), data).expect("QTensor shape matches its values")
}
