//! Autoregressive image generation at desk scale.
//!
//! The stack has five layers:
//!
//! - [`numerics`]: dense f64 tensors, a reverse-mode tape, AdamW, and the
//!   `RGCK` checkpoint format.
//! - [`tokenizer`]: a convolutional vector-quantized autoencoder that turns
//!   images into grids of codebook indices and back.
//! - [`armodel`]: a Llama-style causal decoder over code indices with 2D
//!   rotary embeddings, prefill conditioning and a KV cache.
//! - [`sampler`]: classifier-free guided sampling with temperature, top-k and
//!   top-p filtering.
//! - [`pipeline`]: synthetic data, training loops and evaluation.
//!
//! [`bench`] compares full-recompute decoding against cached decoding.

pub mod armodel;
pub mod bench;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod tokenizer;

pub use error::{Error, Result};
pub use rng::Rng;

/// Configure the global worker pool from `RG_THREADS`, if set.
///
/// Safe to call more than once; later calls are no-ops.
pub fn init_threads_from_env() {
    if let Some(n) = std::env::var("RG_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}
