//! Dense tensors, reverse-mode differentiation and optimization.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, DType};
pub use gradcheck::{finite_diff_check, GradReport};
pub use optim::{AdamW, AdamWConfig, OptimizerState, StepReport};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
