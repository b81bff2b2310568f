//! Desk-scale training and evaluation: synthetic data, tokenizer and
//! transformer training loops, multi-crop code extraction and
//! reconstruction reports.

pub mod config;
pub mod data;
pub mod eval;
pub mod train_ar;
pub mod train_tokenizer;

pub use config::TrainConfig;
pub use data::{
    crop_offsets, load_dataset, make_synthetic, precompute_codes, save_dataset, select_images, SyntheticConfig,
    SyntheticDataset,
};
pub use eval::{eval_reconstruction, EvalReport, EvalRow, IdentityReconstructor, Reconstructor};
pub use train_ar::{train_ar, train_ar_from, ArLogRow, ArRun};
pub use train_tokenizer::{train_tokenizer, TokLogRow, TokenizerRun};

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Writes rows with a header line to a CSV file.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
