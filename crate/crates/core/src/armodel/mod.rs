//! Causal transformer over token grids: configuration presets, 2D rotary
//! positions, condition prefill, a differentiable training forward and a
//! key/value-cached inference path.

pub mod cache;
pub mod condition;
pub mod config;
pub mod model;
pub mod rope;

pub use cache::KVCache;
pub use condition::{condition_dropout, Condition};
pub use config::{llama_ffn, Conditioning, ModelConfig, MAX_TEXT_LEN};
pub use model::ArModel;
pub use rope::{rope1d_angles, rope2d_angles};
