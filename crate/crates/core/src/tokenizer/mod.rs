//! Vector-quantized image tokenizer: a convolutional encoder, an
//! l2-normalized codebook, a mirrored decoder, and the training losses and
//! quality metrics around them.

pub mod artk;
pub mod codebook;
pub mod config;
pub mod discriminator;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pnm;

pub use artk::TokenDataset;
pub use codebook::{quantize, Codebook, QuantizeResult, UsageQueue};
pub use config::{CodebookInit, TokenizerConfig};
pub use discriminator::PatchDiscriminator;
pub use grid::TokenGrid;
pub use metrics::{psnr, ssim, PSNR_CAP_DB};
pub use model::{AeOutput, Tokenizer};
