use std::path::Path;

use super::codebook::{assign_codes, normalize_rows, quantize, Codebook, QuantizeResult, UsageQueue, NORM_EPS};
use super::config::TokenizerConfig;
use super::grid::TokenGrid;
use super::losses::vq_loss;
use crate::error::{ensure, Error, Result};
use crate::numerics::checkpoint::{load_checkpoint, save_checkpoint};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

/// Variance floor of the encoder's group normalization.
pub const GROUP_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvIds {
    pub w: ParamId,
    pub b: ParamId,
}

/// Registers a conv layer with PyTorch-style uniform init `+-1/sqrt(fan_in)`.
/// For transposed layers the kernel is `[c_in, c_out, k, k]`.
pub(crate) fn add_conv(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    transpose: bool,
    rng: &mut Rng,
) -> ConvIds {
    let (shape, fan_in) = if transpose {
        ([c_in, c_out, k, k], c_out * k * k)
    } else {
        ([c_out, c_in, k, k], c_in * k * k)
    };
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = store.add(format!("{name}.w"), Tensor::uniform(&shape, -bound, bound, rng));
    let b = store.add(format!("{name}.b"), Tensor::uniform(&[c_out], -bound, bound, rng));
    ConvIds { w, b }
}

#[derive(Clone, Debug)]
struct Layout {
    conv_in: ConvIds,
    down: Vec<ConvIds>,
    norm_gain: ParamId,
    norm_bias: ParamId,
    quant: ConvIds,
    codebook: ParamId,
    post_quant: ConvIds,
    up: Vec<ConvIds>,
    conv_out: ConvIds,
}

/// Encoder, codebook and decoder weights with the usage queue.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub params: ParamStore,
    layout: Layout,
    pub usage: UsageQueue,
}

/// Nodes produced by one training forward pass.
pub struct AeOutput {
    pub x_hat: Var,
    /// Normalized encoder features, `[n*h*w, C]`.
    pub features: Var,
    /// Selected normalized codes, `[n*h*w, C]`.
    pub z_q: Var,
    pub indices: Vec<u32>,
    pub grid: (usize, usize, usize),
    pub codebook_loss: Var,
    pub commit_loss: Var,
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let ch = &config.channels;
        let n = config.stages();
        let mut s = ParamStore::new();
        let conv_in = add_conv(&mut s, "enc.conv_in", config.image_channels, ch[0], 3, false, rng);
        let down = (0..n)
            .map(|i| add_conv(&mut s, &format!("enc.down.{i}"), ch[i], ch[i + 1], 4, false, rng))
            .collect();
        let norm_gain = s.add("enc.norm.gain", Tensor::full(&[ch[n]], 1.0));
        let norm_bias = s.add("enc.norm.bias", Tensor::zeros(&[ch[n]]));
        let quant = add_conv(&mut s, "enc.quant", ch[n], config.code_dim, 1, false, rng);
        s.get_mut(quant.b).data_mut().fill(0.0);
        let cb = Codebook::uniform_sphere(config.codebook_size, config.code_dim, 1, rng)?;
        let codebook = s.add("codebook", cb.vectors().clone());
        let post_quant = add_conv(&mut s, "dec.post_quant", config.code_dim, ch[n], 1, false, rng);
        let up = (0..n)
            .rev()
            .map(|i| add_conv(&mut s, &format!("dec.up.{i}"), ch[i + 1], ch[i], 4, true, rng))
            .collect();
        let conv_out = add_conv(&mut s, "dec.conv_out", ch[0], config.image_channels, 3, false, rng);
        let usage = UsageQueue::new(config.usage_queue, config.codebook_size);
        Ok(Self {
            config,
            params: s,
            layout: Layout { conv_in, down, norm_gain, norm_bias, quant, codebook, post_quant, up, conv_out },
            usage,
        })
    }

    fn p(&self, tape: &mut Tape, id: ParamId, train: bool) -> Var {
        if train {
            tape.param(&self.params, id)
        } else {
            tape.frozen_param(&self.params, id)
        }
    }

    fn conv(&self, tape: &mut Tape, x: Var, ids: ConvIds, stride: usize, pad: usize, train: bool) -> Result<Var> {
        let w = self.p(tape, ids.w, train);
        let b = self.p(tape, ids.b, train);
        tape.conv2d(x, w, Some(b), stride, pad)
    }

    fn check_images(&self, shape: &[usize]) -> Result<(usize, usize, usize)> {
        ensure!(shape.len() == 4, Dimension, "images must be NCHW, got {:?}", shape);
        ensure!(
            shape[1] == self.config.image_channels,
            Dimension,
            "expected {} image channels, got {}",
            self.config.image_channels,
            shape[1]
        );
        let (h, w) = self.config.grid_for(shape[2], shape[3])?;
        Ok((shape[0], h, w))
    }

    /// Raw encoder output `[n, C, h, w]`.
    pub fn encode_tape(&self, tape: &mut Tape, x: Var, train: bool) -> Result<Var> {
        self.check_images(tape.shape(x))?;
        let mut h = self.conv(tape, x, self.layout.conv_in, 1, 1, train)?;
        h = tape.silu(h);
        for &ids in &self.layout.down {
            h = self.conv(tape, h, ids, 2, 1, train)?;
            h = tape.silu(h);
        }
        let g = self.p(tape, self.layout.norm_gain, train);
        let b = self.p(tape, self.layout.norm_bias, train);
        h = tape.group_norm(h, self.config.norm_groups, g, b, GROUP_NORM_EPS)?;
        self.conv(tape, h, self.layout.quant, 1, 0, train)
    }

    /// Decodes code rows `[n*h*w, C]` to images.
    pub fn decode_tape(&self, tape: &mut Tape, z_rows: Var, n: usize, h: usize, w: usize, train: bool) -> Result<Var> {
        let z = tape.rows_to_nchw(z_rows, n, h, w)?;
        let mut y = self.conv(tape, z, self.layout.post_quant, 1, 0, train)?;
        y = tape.silu(y);
        for &ids in &self.layout.up {
            let wv = self.p(tape, ids.w, train);
            let bv = self.p(tape, ids.b, train);
            y = tape.conv2d_transpose(y, wv, Some(bv), 2, 1)?;
            y = tape.silu(y);
        }
        self.conv(tape, y, self.layout.conv_out, 1, 1, train)
    }

    /// Full encode-quantize-decode pass with straight-through gradients.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, train: bool) -> Result<AeOutput> {
        let (n, h, w) = self.check_images(tape.shape(x))?;
        let f = self.encode_tape(tape, x, train)?;
        let rows = tape.nchw_to_rows(f)?;
        let features = tape.l2_normalize(rows, NORM_EPS);
        let cb = self.p(tape, self.layout.codebook, train);
        let table = tape.l2_normalize(cb, NORM_EPS);
        let indices = assign_codes(
            tape.value(features).data(),
            tape.value(table).data(),
            self.config.code_dim,
        );
        let idx: Vec<usize> = indices.iter().map(|&i| i as usize).collect();
        let z_q = tape.gather_rows(table, &idx)?;
        let z_st = tape.straight_through(features, z_q)?;
        let (codebook_loss, commit_loss) = vq_loss(tape, features, z_q, self.config.beta)?;
        let x_hat = self.decode_tape(tape, z_st, n, h, w, train)?;
        Ok(AeOutput {
            x_hat,
            features,
            z_q,
            indices,
            grid: (n, h, w),
            codebook_loss,
            commit_loss,
        })
    }

    /// Encoder features `[n, h, w, C]`, before normalization.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (n, h, w) = self.check_images(images.shape())?;
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let f = self.encode_tape(&mut tape, x, false)?;
        let rows = tape.nchw_to_rows(f)?;
        tape.value(rows).clone().reshape(&[n, h, w, self.config.code_dim])
    }

    pub fn codebook(&self) -> Codebook {
        let mut cb = Codebook::new(self.params.get(self.layout.codebook).clone(), self.config.usage_queue)
            .expect("validated at construction");
        cb.usage = self.usage.clone();
        cb
    }

    pub fn codebook_id(&self) -> ParamId {
        self.layout.codebook
    }

    pub fn quantize(&self, features: &Tensor) -> Result<QuantizeResult> {
        quantize(features, &self.codebook(), self.config.beta)
    }

    /// Decodes normalized code vectors `[n, h, w, C]`.
    pub fn decode(&self, z_q: &Tensor) -> Result<Tensor> {
        let s = z_q.shape();
        ensure!(
            s.len() == 4 && s[3] == self.config.code_dim,
            Dimension,
            "decode expects [n, h, w, {}], got {:?}",
            self.config.code_dim,
            s
        );
        let (n, h, w) = (s[0], s[1], s[2]);
        let mut tape = Tape::new();
        let rows = tape.constant(z_q.clone().reshape(&[n * h * w, s[3]])?);
        let out = self.decode_tape(&mut tape, rows, n, h, w, false)?;
        Ok(tape.value(out).clone())
    }

    pub fn decode_grids(&self, grids: &[TokenGrid]) -> Result<Tensor> {
        let first = grids.first().ok_or_else(|| Error::Dimension("no grids to decode".into()))?;
        let (h, w, c, k) = (first.h, first.w, self.config.code_dim, self.config.codebook_size);
        let mut table = self.params.get(self.layout.codebook).data().to_vec();
        normalize_rows(&mut table, c);
        let mut z = Vec::with_capacity(grids.len() * h * w * c);
        for g in grids {
            ensure!(g.h == h && g.w == w, Dimension, "grids of mixed size");
            for &i in &g.indices {
                if i as usize >= k {
                    return Err(Error::Index(format!("code {i} out of range for codebook of {k}")));
                }
                z.extend_from_slice(&table[i as usize * c..(i as usize + 1) * c]);
            }
        }
        self.decode(&Tensor::new(&[grids.len(), h, w, c], z)?)
    }

    pub fn tokenize(&self, images: &Tensor) -> Result<Vec<TokenGrid>> {
        Ok(self.quantize(&self.encode(images)?)?.grids)
    }

    /// Encode, quantize and decode; returns the reconstruction and the grids.
    pub fn reconstruct(&self, images: &Tensor) -> Result<(Tensor, Vec<TokenGrid>)> {
        let q = self.quantize(&self.encode(images)?)?;
        Ok((self.decode(&q.z_q)?, q.grids))
    }

    /// Overwrites the codebook with normalized encoder features at distinct
    /// random positions of `images`. Rows beyond the number of positions keep
    /// their current values.
    pub fn init_codebook_from(&mut self, images: &Tensor, rng: &mut Rng) -> Result<()> {
        let f = self.encode(images)?;
        let c = self.config.code_dim;
        let n = f.len() / c;
        let k = self.config.codebook_size.min(n);
        // Partial Fisher-Yates over positions.
        let mut order: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + rng.below(n - i);
            order.swap(i, j);
        }
        let id = self.layout.codebook;
        let table = self.params.get_mut(id).data_mut();
        for (row, &pos) in order[..k].iter().enumerate() {
            table[row * c..(row + 1) * c].copy_from_slice(&f.data()[pos * c..(pos + 1) * c]);
        }
        self.normalize_codebook();
        Ok(())
    }

    /// Projects codebook rows back onto the unit sphere.
    pub fn normalize_codebook(&mut self) {
        let c = self.config.code_dim;
        normalize_rows(self.params.get_mut(self.layout.codebook).data_mut(), c);
    }

    /// Writes weights as `RGCK` and the config to `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(&str, &Tensor)> = self.params.iter().collect();
        save_checkpoint(path, &entries)?;
        let side = sidecar(path);
        std::fs::write(&side, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: TokenizerConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", side.display())))?;
        let mut tok = Self::new(config, &mut Rng::new(0))?;
        tok.params.load(load_checkpoint(path)?)?;
        Ok(tok)
    }
}

/// JSON sidecar path next to a checkpoint: `model.rgck` gives `model.rgck.json`.
pub fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
