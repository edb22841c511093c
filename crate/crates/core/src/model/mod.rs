//! GPT decoder: weights, checkpoint I/O, forward pass, the post-training
//! quantization pipeline, sampling and accounting.

mod checkpoint;
mod config;
mod fixtures;
mod forward;
mod generate;
mod quantized;
mod report;
mod weights;

pub(crate) use checkpoint::ByteReader;
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, named_tensors, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION, FLAG_TIED_LM_HEAD,
};
pub use config::{GPTConfig, ParamCensus};
pub use fixtures::{
    decode_fixtures, encode_fixtures, load_fixtures, max_fixture_deviation, LogitFixture,
};
pub use forward::{LanguageModel, OpStats, StorageSummary, LAYERNORM_EPS};
pub use generate::{generate, SamplingConfig};
pub use quantized::{
    activation_site_name, prepare, Payload, QuantizedModel, Site, SiteKind, SiteSummary,
    POS_EMB_SITE, TOK_EMB_SITE,
};
pub use report::{op_report, OpReport, MULTIPLY_CYCLES, SHIFT_CYCLES};
pub use weights::{GPTWeights, LayerNormWeights, LayerWeights, Linear, LinearId, LinearKind};
