use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Longest accepted text condition.
pub const MAX_TEXT_LEN: usize = 120;

/// How the prefill condition is produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Conditioning {
    /// Learned table of `num_classes + 1` rows; the last row is the null slot.
    Class { num_classes: usize },
    /// Two-layer projection of `cond_len x cond_dim` raw features.
    Text { cond_dim: usize, cond_len: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub ffn_hidden: usize,
    /// Dropout on token embeddings, attention output and FFN output.
    pub dropout: f64,
    pub conditioning: Conditioning,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_rope_base() -> f64 {
    10000.0
}

fn default_norm_eps() -> f64 {
    1e-6
}

/// Llama feed-forward width: `2/3 * 4 * hidden` rounded up to `multiple_of`.
pub fn llama_ffn(hidden: usize, multiple_of: usize) -> usize {
    let raw = 2 * 4 * hidden / 3;
    raw.div_ceil(multiple_of) * multiple_of
}

impl ModelConfig {
    fn build(layers: usize, hidden: usize, heads: usize, vocab: usize, grid: usize, classes: usize, multiple_of: usize) -> Self {
        Self {
            layers,
            hidden,
            heads,
            vocab,
            grid_h: grid,
            grid_w: grid,
            ffn_hidden: llama_ffn(hidden, multiple_of),
            dropout: 0.1,
            conditioning: Conditioning::Class { num_classes: classes },
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }

    /// Desk-scale and full-size presets by name.
    ///
    /// `nano` (2/64/4) and `micro` (4/128/4) use K = 64, an 8x8 grid and
    /// 10 classes. `b`, `l`, `xl`, `xxl` and `3b` use K = 16384, a 16x16 grid
    /// and 1000 classes.
    pub fn preset(name: &str) -> Result<Self> {
        let c = match name.to_ascii_lowercase().as_str() {
            "nano" => Self::build(2, 64, 4, 64, 8, 10, 32),
            "micro" => Self::build(4, 128, 4, 64, 8, 10, 32),
            "b" => Self::build(12, 768, 12, 16384, 16, 1000, 256),
            "l" => Self::build(24, 1024, 16, 16384, 16, 1000, 256),
            "xl" => Self::build(36, 1280, 20, 16384, 16, 1000, 256),
            "xxl" => Self::build(48, 1536, 24, 16384, 16, 1000, 256),
            "3b" => Self::build(24, 3200, 32, 16384, 16, 1000, 256),
            other => return Err(Error::Config(format!("unknown model preset {other:?}"))),
        };
        Ok(c)
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn seq_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn cond_len(&self) -> usize {
        match self.conditioning {
            Conditioning::Class { .. } => 1,
            Conditioning::Text { cond_len, .. } => cond_len,
        }
    }

    /// Cache capacity: condition prefix plus every image token.
    pub fn max_len(&self) -> usize {
        self.cond_len() + self.seq_tokens()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.layers > 0 && self.hidden > 0 && self.heads > 0, Config, "layers, hidden and heads must be positive");
        ensure!(
            self.hidden % self.heads == 0,
            Config,
            "hidden {} not divisible by heads {}",
            self.hidden,
            self.heads
        );
        ensure!(
            self.head_dim() % 4 == 0,
            Config,
            "head_dim {} must be divisible by 4 for 2D rotary embeddings",
            self.head_dim()
        );
        ensure!(self.vocab > 0 && self.ffn_hidden > 0, Config, "vocab and ffn width must be positive");
        ensure!(self.grid_h > 0 && self.grid_w > 0, Config, "empty token grid");
        ensure!((0.0..1.0).contains(&self.dropout), Config, "dropout must be in [0, 1)");
        match self.conditioning {
            Conditioning::Class { num_classes } => ensure!(num_classes > 0, Config, "need at least one class"),
            Conditioning::Text { cond_dim, cond_len } => {
                ensure!(cond_dim > 0 && cond_len > 0, Config, "text condition extents must be positive");
                if cond_len > MAX_TEXT_LEN {
                    return Err(Error::Length(format!("text length {cond_len} exceeds {MAX_TEXT_LEN}")));
                }
            }
        }
        Ok(())
    }

    /// Number of trainable scalars for this configuration.
    ///
    /// Token embedding, condition weights, per layer four attention
    /// projections, three FFN matrices and two norm gains, the final norm and
    /// an untied output head. Linear layers carry no bias except in the text
    /// projection.
    pub fn param_count(&self) -> usize {
        let (h, k, f) = (self.hidden, self.vocab, self.ffn_hidden);
        let cond = match self.conditioning {
            Conditioning::Class { num_classes } => (num_classes + 1) * h,
            Conditioning::Text { cond_dim, .. } => cond_dim * h + h + h * h + h + h,
        };
        k * h + cond + self.layers * (4 * h * h + 3 * h * f + 2 * h) + h + h * k
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ffn_rule() {
        assert_eq!(llama_ffn(768, 256), 2048);
        assert_eq!(llama_ffn(1024, 256), 2816);
        assert_eq!(llama_ffn(1280, 256), 3584);
        assert_eq!(llama_ffn(1536, 256), 4096);
        assert_eq!(llama_ffn(3200, 256), 8704);
        assert_eq!(llama_ffn(64, 32), 192);
        assert_eq!(llama_ffn(128, 32), 352);
    }

    #[test]
    fn head_dim_rule() {
        let mut c = ModelConfig::preset("nano").unwrap();
        assert!(c.validate().is_ok());
        c.heads = 8; // head_dim 8
        assert!(c.validate().is_ok());
        c.heads = 32; // head_dim 2
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        for name in ["b", "l", "xl", "xxl", "3b"] {
            assert!(ModelConfig::preset(name).unwrap().validate().is_ok(), "{name}");
        }
        assert!(ModelConfig::preset("giant").is_err());
    }

    #[test]
    fn text_length_limit() {
        let mut c = ModelConfig::preset("nano").unwrap();
        c.conditioning = Conditioning::Text { cond_dim: 16, cond_len: 121 };
        assert!(matches!(c.validate(), Err(Error::Length(_))));
        c.conditioning = Conditioning::Text { cond_dim: 16, cond_len: 120 };
        assert!(c.validate().is_ok());
        assert_eq!(c.max_len(), 120 + 64);
    }

    #[test]
    fn config_json_round_trip() {
        let c = ModelConfig::preset("micro").unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
