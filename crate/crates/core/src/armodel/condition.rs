use crate::error::Result;
use crate::numerics::Tensor;
use crate::rng::Rng;

use super::config::MAX_TEXT_LEN;
use crate::error::{ensure, Error};

/// A generation or training condition before embedding.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    Class(usize),
    /// Raw `cond_len x cond_dim` features; `padding[i]` marks left-pad rows.
    Text { raw: Tensor, padding: Vec<bool> },
    /// The unconditional (null) embedding.
    Null,
}

impl Condition {
    pub fn is_null(&self) -> bool {
        matches!(self, Condition::Null)
    }

    /// Text condition from unpadded rows, left-padded with zeros to `len`.
    pub fn text_left_padded(rows: &Tensor, len: usize) -> Result<Self> {
        ensure!(rows.rank() == 2, Dimension, "text features must be [n, dim], got {:?}", rows.shape());
        let (n, d) = (rows.shape()[0], rows.shape()[1]);
        if len > MAX_TEXT_LEN || n > len {
            return Err(Error::Length(format!("{n} text rows do not fit length {len} (max {MAX_TEXT_LEN})")));
        }
        let mut raw = vec![0.0; (len - n) * d];
        raw.extend_from_slice(rows.data());
        let padding = (0..len).map(|i| i < len - n).collect();
        Ok(Condition::Text { raw: Tensor::new(&[len, d], raw)?, padding })
    }
}

/// Replaces the condition with [`Condition::Null`] with probability `p_drop`.
pub fn condition_dropout(cond: &Condition, p_drop: f64, rng: &mut Rng) -> Condition {
    if p_drop > 0.0 && rng.bernoulli(p_drop) {
        Condition::Null
    } else {
        cond.clone()
    }
}
