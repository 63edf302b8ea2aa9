//! Decoder-only transformer inference with pluggable KV cache policies, centred on
//! iterative frequency-domain compression of the cache (DCT low-pass with amplitude
//! rescaling, uncompressed sink tokens, pre-RoPE keys, chunked prefill).

pub mod analysis;
pub mod attention;
pub mod baselines;
pub mod cache;
mod codec;
pub mod error;
pub mod model;
pub mod spectral;
pub mod tensor;
pub mod tokens;

pub use baselines::{CachePolicy, PolicyKind};
pub use cache::{expected_compressions, CachePolicyConfig, CompressionEvent, FreqKvCache, KvCache};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, RunMetadata, Session, WeightStore};
pub use tensor::KvTensor;
