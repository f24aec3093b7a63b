//! Embedding-gated multi-head latent attention (EG-MLA), its MHA/GQA/MQA/MLA
//! baselines, a small decoder-only model built on them, and the tooling to
//! audit, train and verify it.

pub mod attn;
pub mod baseline;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod equiv;
pub mod error;
pub mod fixtures;
pub mod grad;
pub mod kernel;
pub mod kvcache;
pub mod latent;
pub mod model;
pub mod rope;
pub mod runconfig;
pub mod shard;

pub use config::{GatingMode, LatentAttnConfig, ModelConfig, Variant};
pub use error::{Error, Result};
pub use kernel::{DType, Real, Rng, Tensor};
pub use model::{decode, forward_full, ModelWeights, Sampler};
