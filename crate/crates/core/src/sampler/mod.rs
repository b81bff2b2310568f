//! Guided sampling: logit fusion, filtering, categorical draws and the
//! token-by-token generation loop.

pub mod filter;
pub mod generate;

pub use filter::{cfg_combine, filter_logits, sample_token, SamplingConfig};
pub use generate::{batch_generate, batch_generate_with, generate, generate_with, row_seed, DecodeMode};
