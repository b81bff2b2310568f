use std::path::Path;

use super::condition::Condition;
use super::config::{Conditioning, ModelConfig, MAX_TEXT_LEN};
use super::rope::sequence_angles;
use crate::error::{ensure, Error, Result};
use crate::numerics::checkpoint::{load_checkpoint, save_checkpoint};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::tokenizer::model::sidecar;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub(crate) struct LayerIds {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub w_gate: ParamId,
    pub w_up: ParamId,
    pub w_down: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) enum CondIds {
    Class { table: ParamId },
    Text { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId, null: ParamId },
}

/// Decoder-only transformer over image tokens with a prefilled condition.
#[derive(Clone, Debug)]
pub struct ArModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub(crate) tok_emb: ParamId,
    pub(crate) cond: CondIds,
    pub(crate) layers: Vec<LayerIds>,
    pub(crate) final_norm: ParamId,
    pub(crate) head: ParamId,
    /// Rotary angles for every sequence position, `[max_len, head_dim/2]`.
    pub(crate) angles: Vec<f64>,
}

fn normal(s: &mut ParamStore, name: impl Into<String>, shape: &[usize], rng: &mut Rng) -> ParamId {
    s.add(name, Tensor::randn(shape, INIT_STD, rng))
}

impl ArModel {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, k, f) = (config.hidden, config.vocab, config.ffn_hidden);
        let mut s = ParamStore::new();
        let tok_emb = normal(&mut s, "tok_emb", &[k, d], rng);
        let cond = match config.conditioning {
            Conditioning::Class { num_classes } => CondIds::Class {
                table: normal(&mut s, "cond.class", &[num_classes + 1, d], rng),
            },
            Conditioning::Text { cond_dim, .. } => {
                let w1 = normal(&mut s, "cond.w1", &[cond_dim, d], rng);
                let b1 = s.add("cond.b1", Tensor::zeros(&[d]));
                let w2 = normal(&mut s, "cond.w2", &[d, d], rng);
                let b2 = s.add("cond.b2", Tensor::zeros(&[d]));
                let null = s.add_with_decay("cond.null", Tensor::randn(&[1, d], INIT_STD, rng), false);
                CondIds::Text { w1, b1, w2, b2, null }
            }
        };
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let attn_norm = s.add(format!("layers.{i}.attn_norm"), Tensor::full(&[d], 1.0));
            let wq = normal(&mut s, format!("layers.{i}.wq"), &[d, d], rng);
            let wk = normal(&mut s, format!("layers.{i}.wk"), &[d, d], rng);
            let wv = normal(&mut s, format!("layers.{i}.wv"), &[d, d], rng);
            let wo = normal(&mut s, format!("layers.{i}.wo"), &[d, d], rng);
            let ffn_norm = s.add(format!("layers.{i}.ffn_norm"), Tensor::full(&[d], 1.0));
            let w_gate = normal(&mut s, format!("layers.{i}.w_gate"), &[d, f], rng);
            let w_up = normal(&mut s, format!("layers.{i}.w_up"), &[d, f], rng);
            let w_down = normal(&mut s, format!("layers.{i}.w_down"), &[f, d], rng);
            layers.push(LayerIds { attn_norm, wq, wk, wv, wo, ffn_norm, w_gate, w_up, w_down });
        }
        let final_norm = s.add("final_norm", Tensor::full(&[d], 1.0));
        let head = normal(&mut s, "head", &[d, k], rng);
        let angles = sequence_angles(
            config.cond_len(),
            config.grid_h,
            config.grid_w,
            config.head_dim(),
            config.rope_base,
        )?;
        Ok(Self { config, params: s, tok_emb, cond, layers, final_norm, head, angles })
    }

    fn p(&self, tape: &mut Tape, id: ParamId, track: bool) -> Var {
        if track {
            tape.param(&self.params, id)
        } else {
            tape.frozen_param(&self.params, id)
        }
    }

    /// Two-layer text projection of stacked raw rows `[n, cond_dim]`; rows
    /// flagged in `null_rows` become the learned null vector.
    fn project_text(&self, tape: &mut Tape, raw: Tensor, null_rows: &[bool], track: bool) -> Result<Var> {
        let CondIds::Text { w1, b1, w2, b2, null } = self.cond else {
            return Err(Error::Config("model is not text-conditioned".into()));
        };
        let x = tape.constant(raw);
        let (w1, b1, w2, b2, null) = (
            self.p(tape, w1, track),
            self.p(tape, b1, track),
            self.p(tape, w2, track),
            self.p(tape, b2, track),
            self.p(tape, null, track),
        );
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias(h, b1)?;
        let h = tape.silu(h);
        let h = tape.matmul(h, w2)?;
        let h = tape.add_bias(h, b2)?;
        if null_rows.iter().any(|&m| m) {
            tape.replace_rows(h, null, null_rows)
        } else {
            Ok(h)
        }
    }

    /// Condition prefix for a batch, `[batch * cond_len, hidden]`.
    pub fn embed_conditions(&self, tape: &mut Tape, conds: &[Condition], track: bool) -> Result<Var> {
        match (&self.config.conditioning, &self.cond) {
            (Conditioning::Class { num_classes }, CondIds::Class { table }) => {
                let idx = conds
                    .iter()
                    .map(|c| match c {
                        Condition::Class(i) if i < num_classes => Ok(*i),
                        Condition::Class(i) => Err(Error::Index(format!("class {i} out of range for {num_classes} classes"))),
                        Condition::Null => Ok(*num_classes),
                        Condition::Text { .. } => Err(Error::Config("text condition given to a class-conditioned model".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let t = self.p(tape, *table, track);
                tape.gather_rows(t, &idx)
            }
            (Conditioning::Text { cond_dim, cond_len }, _) => {
                let (cd, lc) = (*cond_dim, *cond_len);
                let mut raw = Vec::with_capacity(conds.len() * lc * cd);
                let mut mask = Vec::with_capacity(conds.len() * lc);
                for c in conds {
                    match c {
                        Condition::Text { raw: r, padding } => {
                            if r.shape().first().is_some_and(|&n| n > MAX_TEXT_LEN) {
                                return Err(Error::Length(format!("text length {} exceeds {MAX_TEXT_LEN}", r.shape()[0])));
                            }
                            ensure!(
                                r.shape() == [lc, cd] && padding.len() == lc,
                                Dimension,
                                "text condition must be [{lc}, {cd}] with {lc} padding flags, got {:?}",
                                r.shape()
                            );
                            raw.extend_from_slice(r.data());
                            mask.extend_from_slice(padding);
                        }
                        Condition::Null => {
                            raw.extend(std::iter::repeat(0.0).take(lc * cd));
                            mask.extend(std::iter::repeat(true).take(lc));
                        }
                        Condition::Class(_) => {
                            return Err(Error::Config("class condition given to a text-conditioned model".into()))
                        }
                    }
                }
                let raw = Tensor::new(&[conds.len() * lc, cd], raw)?;
                self.project_text(tape, raw, &mask, track)
            }
            _ => unreachable!("condition weights follow the config"),
        }
    }

    /// Batched forward returning logits `[batch * (n+1), K]` where row `i`
    /// of each sequence predicts image token `i`.
    ///
    /// `tokens` are equal-length input prefixes. Dropout is applied when
    /// `dropout_rng` is given; `track` makes the weights differentiable.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        tokens: &[Vec<u32>],
        conds: &[Condition],
        mut dropout_rng: Option<&mut Rng>,
        track: bool,
    ) -> Result<Var> {
        let cfg = &self.config;
        let b = conds.len();
        ensure!(b > 0 && tokens.len() == b, Dimension, "{} token rows for {} conditions", tokens.len(), b);
        let n = tokens[0].len();
        ensure!(tokens.iter().all(|t| t.len() == n), Dimension, "token rows differ in length");
        ensure!(n <= cfg.seq_tokens(), Length, "{} tokens exceed the {} grid positions", n, cfg.seq_tokens());
        let (lc, heads, hd) = (cfg.cond_len(), cfg.heads, cfg.head_dim());
        let t = lc + n;
        let p = cfg.dropout;

        let mut x = self.embed_conditions(tape, conds, track)?;
        if n > 0 {
            let flat: Vec<usize> = tokens.iter().flatten().map(|&i| i as usize).collect();
            let table = self.p(tape, self.tok_emb, track);
            let mut e = tape.gather_rows(table, &flat)?;
            if let Some(r) = dropout_rng.as_deref_mut() {
                e = tape.dropout(e, p, r);
            }
            x = tape.concat_seq(x, e, b)?;
        }
        let angles = &self.angles[..t * hd / 2];
        for l in &self.layers {
            let g = self.p(tape, l.attn_norm, track);
            let a = tape.rms_norm(x, g, cfg.norm_eps)?;
            let (wq, wk, wv, wo) = (
                self.p(tape, l.wq, track),
                self.p(tape, l.wk, track),
                self.p(tape, l.wv, track),
                self.p(tape, l.wo, track),
            );
            let q = tape.matmul(a, wq)?;
            let k = tape.matmul(a, wk)?;
            let v = tape.matmul(a, wv)?;
            let q = tape.rope(q, angles, t, heads)?;
            let k = tape.rope(k, angles, t, heads)?;
            let att = tape.causal_attention(q, k, v, b, heads)?;
            let mut o = tape.matmul(att, wo)?;
            if let Some(r) = dropout_rng.as_deref_mut() {
                o = tape.dropout(o, p, r);
            }
            x = tape.add(x, o)?;

            let g = self.p(tape, l.ffn_norm, track);
            let a = tape.rms_norm(x, g, cfg.norm_eps)?;
            let (wg, wu, wd) = (
                self.p(tape, l.w_gate, track),
                self.p(tape, l.w_up, track),
                self.p(tape, l.w_down, track),
            );
            let mut f = tape.swiglu(a, wg, wu, wd)?;
            if let Some(r) = dropout_rng.as_deref_mut() {
                f = tape.dropout(f, p, r);
            }
            x = tape.add(x, f)?;
        }
        let g = self.p(tape, self.final_norm, track);
        let x = tape.rms_norm(x, g, cfg.norm_eps)?;
        let rows: Vec<usize> = (0..b).flat_map(|s| (s * t + lc - 1)..(s + 1) * t).collect();
        let x = tape.gather_rows(x, &rows)?;
        let head = self.p(tape, self.head, track);
        tape.matmul(x, head)
    }

    /// Mean next-token cross-entropy over full token sequences.
    pub fn loss_tape(
        &self,
        tape: &mut Tape,
        sequences: &[Vec<u32>],
        conds: &[Condition],
        dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let k = self.config.vocab;
        let mut inputs = Vec::with_capacity(sequences.len());
        let mut targets = Vec::new();
        for s in sequences {
            ensure!(!s.is_empty(), Length, "empty training sequence");
            if let Some(&bad) = s.iter().find(|&&i| i as usize >= k) {
                return Err(Error::Index(format!("token {bad} out of range for vocabulary {k}")));
            }
            inputs.push(s[..s.len() - 1].to_vec());
            targets.extend(s.iter().map(|&i| i as usize));
        }
        let logits = self.forward_tape(tape, &inputs, conds, dropout_rng, true)?;
        tape.softmax_cross_entropy(logits, &targets)
    }

    /// Inference logits `[n+1, K]` for one sequence without a cache; row `i`
    /// predicts token `i`.
    pub fn forward_full(&self, tokens: &[u32], cond: &Condition) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, &[tokens.to_vec()], std::slice::from_ref(cond), None, false)?;
        Ok(tape.value(out).clone())
    }

    /// Projects a text condition to prefill vectors `[len, hidden]`; padding
    /// rows become the null embedding.
    pub fn text_condition_project(&self, raw: &Tensor, padding: &[bool]) -> Result<Tensor> {
        ensure!(raw.rank() == 2, Dimension, "text features must be [len, dim], got {:?}", raw.shape());
        let len = raw.shape()[0];
        if len > MAX_TEXT_LEN {
            return Err(Error::Length(format!("text length {len} exceeds {MAX_TEXT_LEN}")));
        }
        ensure!(padding.len() == len, Dimension, "{} padding flags for {} rows", padding.len(), len);
        let mut tape = Tape::new();
        let v = self.project_text(&mut tape, raw.clone(), padding, false)?;
        Ok(tape.value(v).clone())
    }

    /// Null embedding vector, `[1, hidden]`.
    pub fn null_embedding(&self) -> Tensor {
        let d = self.config.hidden;
        match self.cond {
            CondIds::Class { table } => {
                let t = self.params.get(table);
                let n = t.shape()[0];
                Tensor::new(&[1, d], t.data()[(n - 1) * d..].to_vec()).expect("row")
            }
            CondIds::Text { null, .. } => self.params.get(null).clone(),
        }
    }

    /// Weights as `RGCK` plus the config in `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(&str, &Tensor)> = self.params.iter().collect();
        save_checkpoint(path, &entries)?;
        let side = sidecar(path);
        std::fs::write(&side, serde_json::to_string_pretty(&self.config)?).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: ModelConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", side.display())))?;
        let mut m = Self::new(config, &mut Rng::new(0))?;
        m.params.load(load_checkpoint(path)?)?;
        Ok(m)
    }
}
