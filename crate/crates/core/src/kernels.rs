//! Numeric kernels: the float reference matmul, the dequantize-then-matmul
//! linear, and the shift-accumulate linear for power-of-two weights.
//!
//! Weights use the `[in, out]` row-major layout throughout, so a linear layer
//! is `x[m, k] @ w[k, n] + bias[n]`.

use std::ops::AddAssign;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{dequantize, pot_dequantize, PoTWeight, QScheme, QTensor};
use crate::tensor::Tensor;

/// Below this many multiply-accumulates the kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 16;

/// Largest activation width the shift kernel accepts.
pub const SHIFT_MAX_INPUT_BITS: u32 = 16;

/// Arithmetic operation tally.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    pub multiplies: u64,
    pub shifts: u64,
    pub adds: u64,
}

impl AddAssign for OpCounter {
    fn add_assign(&mut self, rhs: Self) {
        self.multiplies += rhs.multiplies;
        self.shifts += rhs.shifts;
        self.adds += rhs.adds;
    }
}

/// A quantized weight operand for [`linear_fakequant`].
#[derive(Debug, Clone, Copy)]
pub enum QuantWeight<'a> {
    PoT(&'a PoTWeight),
    Uniform(&'a QTensor),
}

impl QuantWeight<'_> {
    pub fn dequantize(&self) -> Tensor {
        match self {
            QuantWeight::PoT(w) => pot_dequantize(w),
            QuantWeight::Uniform(q) => dequantize(q),
        }
    }
}

pub fn matmul_f32(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul_f32_counted(a, b, &mut OpCounter::default())
}

/// Row-by-column product with f64 accumulation.
pub fn matmul_f32_counted(a: &Tensor, b: &Tensor, ops: &mut OpCounter) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul of {:?} by {:?}: inner dimensions differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0f32; m * n];
    let (ad, bd) = (a.data(), b.data());
    let row = |(i, out_row): (usize, &mut [f32])| {
        let mut acc = vec![0.0f64; n];
        let a_row = &ad[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let av = av as f64;
            let b_row = &bd[p * n..(p + 1) * n];
            for (acc_j, &bv) in acc.iter_mut().zip(b_row) {
                *acc_j += av * bv as f64;
            }
        }
        for (o, v) in out_row.iter_mut().zip(&acc) {
            *o = *v as f32;
        }
    };
    if n > 0 {
        if m * k * n >= PAR_THRESHOLD {
            out.par_chunks_mut(n).enumerate().for_each(row);
        } else {
            out.chunks_mut(n).enumerate().for_each(row);
        }
    }
    let macs = (m * k * n) as u64;
    ops.multiplies += macs;
    ops.adds += macs;
    Tensor::new(vec![m, n], out)
}

fn add_bias(out: &mut Tensor, bias: Option<&Tensor>, ops: &mut OpCounter) -> Result<()> {
    let Some(bias) = bias else { return Ok(()) };
    let n = out.last_dim();
    if bias.len() != n {
        return Err(Error::Shape(format!(
            "bias of length {} does not match output width {n}",
            bias.len()
        )));
    }
    for row in out.data_mut().chunks_mut(n) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += *b;
        }
    }
    ops.adds += out.len() as u64;
    Ok(())
}

/// Float linear layer: `x @ w + bias`.
pub fn linear_f32(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    ops: &mut OpCounter,
) -> Result<Tensor> {
    let mut out = matmul_f32_counted(x, w, ops)?;
    add_bias(&mut out, bias, ops)?;
    Ok(out)
}

/// Simulated-quantization linear: dequantize the weight, then run the float path.
pub fn linear_fakequant(
    x: &Tensor,
    w: QuantWeight<'_>,
    bias: Option<&Tensor>,
    ops: &mut OpCounter,
) -> Result<Tensor> {
    linear_f32(x, &w.dequantize(), bias, ops)
}

fn ceil_log2(n: usize) -> u32 {
    (n.max(1) as u64).next_power_of_two().trailing_zeros()
}

/// Checks that the 64-bit accumulators of [`shift_accumulate`] cannot overflow.
pub fn audit_shift_accumulator(input_bits: u32, w: &PoTWeight, k: usize) -> Result<()> {
    let shift_span = w.config.shift_span();
    let reduction_bits = ceil_log2(k);
    if input_bits + shift_span + reduction_bits > 62 {
        return Err(Error::AccumulatorOverflow {
            input_bits,
            shift_span,
            reduction_bits,
        });
    }
    Ok(())
}

fn check_shift_operands(xq: &QTensor, w: &PoTWeight) -> Result<(usize, usize, usize)> {
    let bits = match xq.params.scheme {
        QScheme::Affine { bits } => bits,
        other => {
            return Err(Error::WrongScheme {
                expected: "affine activations",
                got: other.to_string(),
            })
        }
    };
    if bits > SHIFT_MAX_INPUT_BITS {
        return Err(Error::InvalidConfig(format!(
            "shift kernel takes at most {SHIFT_MAX_INPUT_BITS}-bit activations, got {bits}"
        )));
    }
    let (m, k) = match xq.shape.as_slice() {
        [m, k] => (*m, *k),
        other => {
            return Err(Error::Shape(format!(
                "activations must be a matrix, got {other:?}"
            )))
        }
    };
    let (k2, n) = match w.shape.as_slice() {
        [k, n] => (*k, *n),
        other => {
            return Err(Error::Shape(format!(
                "PoT weight must be a matrix, got {other:?}"
            )))
        }
    };
    if k != k2 {
        return Err(Error::Shape(format!(
            "shift linear of {:?} by {:?}: inner dimensions differ",
            xq.shape, w.shape
        )));
    }
    audit_shift_accumulator(bits, w, k)?;
    Ok((m, k, n))
}

/// Exact integer accumulators `sum_j sign * ((x_j - zp) << (e_j - e_min))`,
/// row-major `[m, n]`. Zero codes contribute nothing.
pub fn shift_accumulate(xq: &QTensor, w: &PoTWeight) -> Result<Vec<i64>> {
    let (m, k, n) = check_shift_operands(xq, w)?;
    Ok(accumulate(xq, w, m, k, n))
}

fn accumulate(xq: &QTensor, w: &PoTWeight, m: usize, k: usize, n: usize) -> Vec<i64> {
    let zp = xq.params.zero_point;
    let e_min = w.config.e_min;
    let mut acc = vec![0i64; m * n];
    let row = |(i, acc_row): (usize, &mut [i64])| {
        let x_row = &xq.values[i * k..(i + 1) * k];
        for (j, &xv) in x_row.iter().enumerate() {
            let centered = xv as i64 - zp;
            let codes = &w.codes[j * n..(j + 1) * n];
            for (a, code) in acc_row.iter_mut().zip(codes) {
                if code.is_zero {
                    continue;
                }
                let term = centered << (code.exponent - e_min) as u32;
                if code.sign < 0 {
                    *a -= term;
                } else {
                    *a += term;
                }
            }
        }
    };
    if n > 0 {
        if m * k * n >= PAR_THRESHOLD {
            acc.par_chunks_mut(n).enumerate().for_each(row);
        } else {
            acc.chunks_mut(n).enumerate().for_each(row);
        }
    }
    acc
}

/// Multiplication-free linear layer for affine activations and PoT weights.
///
/// All weight products are left shifts by `e - e_min`; the common factor
/// `x.scale * w.scale * 2^e_min` is applied once per output element.
pub fn shift_linear(
    xq: &QTensor,
    w: &PoTWeight,
    bias: Option<&Tensor>,
    ops: &mut OpCounter,
) -> Result<Tensor> {
    let (m, k, n) = check_shift_operands(xq, w)?;
    let acc = accumulate(xq, w, m, k, n);

    let x_scale = xq.params.scale;
    let w_factor = w.scale as f64 * 2f64.powi(w.config.e_min);
    let data = acc
        .iter()
        .map(|&a| ((a as f64 * x_scale) * w_factor) as f32)
        .collect();

    let nonzero = (w.len() - w.zero_count()) as u64;
    ops.shifts += m as u64 * nonzero;
    ops.adds += m as u64 * nonzero;
    ops.multiplies += 2 * (m * n) as u64;

    let mut out = Tensor::new(vec![m, n], data)?;
    add_bias(&mut out, bias, ops)?;
    Ok(out)
}

/// Row-wise layer normalization over the last dimension.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Shape(format!(
            "layernorm width {d} vs gamma {} / beta {}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = x.clone();
    if d == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = ((*v as f64 - mean) * inv * *g as f64 + *b as f64) as f32;
        }
    }
    Ok(out)
}

/// Softmax over the last dimension with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let d = x.last_dim();
    if d == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(d) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0f64;
    let mut exps = Vec::with_capacity(row.len());
    for &v in row.iter() {
        let e = ((v - max) as f64).exp();
        sum += e;
        exps.push(e);
    }
    for (v, e) in row.iter_mut().zip(exps) {
        *v = (e / sum) as f32;
    }
}

/// Tanh approximation of GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = gelu_scalar(*v);
    }
    out
}

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let x = x as f64;
    (0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())) as f32
}
