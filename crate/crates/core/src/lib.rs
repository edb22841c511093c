//! Power-of-two post-training quantization for GPT-style transformers.
//!
//! The crate covers the whole evaluation loop: character-level dataset
//! preparation ([`data`]), symmetric/affine/power-of-two codecs with min/max
//! observers ([`quant`]), float and shift-accumulate kernels ([`kernels`]),
//! a GPT decoder with a prepare/calibrate/convert pipeline ([`model`]), and
//! cross-entropy/perplexity measurement ([`eval`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod model;
pub mod qspec;
pub mod quant;
pub mod tensor;

pub use error::{Error, ErrorCategory, Result};
pub use tensor::Tensor;
