use std::time::Instant;

use serde::Serialize;

use super::config::TrainConfig;
use super::data::SyntheticDataset;
use crate::error::{ensure, Error, Result};
use crate::numerics::{AdamW, Tape};
use crate::rng::Rng;
use crate::tokenizer::discriminator::generator_adv_loss;
use crate::tokenizer::losses::reconstruction_loss;
use crate::tokenizer::{CodebookInit, psnr, ssim, PatchDiscriminator, Tokenizer, TokenizerConfig};

/// One metrics row. Adversarial columns are empty before the branch engages.
#[derive(Clone, Debug, Serialize)]
pub struct TokLogRow {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub gen_adv: Option<f64>,
    pub disc: Option<f64>,
    pub usage: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub wall_ms: f64,
}

pub struct TokenizerRun {
    pub tokenizer: Tokenizer,
    pub discriminator: PatchDiscriminator,
    pub log: Vec<TokLogRow>,
}

fn divergence(step: usize, what: &str, v: f64) -> Error {
    Error::Divergence { step, detail: format!("{what} became {v}") }
}

/// Trains a fresh tokenizer on `data`.
///
/// With data initialization the codebook is first seeded from encoder
/// features of one random batch.
/// Each step draws a batch with replacement, minimizes reconstruction plus
/// codebook plus commitment loss, renormalizes the codebook and records the
/// chosen codes in the usage queue. From `adv_start_iter` on, a patch
/// discriminator is updated on the same batch and its generator term is
/// added with weight `lambda_g`.
pub fn train_tokenizer(data: &SyntheticDataset, config: &TokenizerConfig, train: &TrainConfig) -> Result<TokenizerRun> {
    config.validate()?;
    train.validate()?;
    ensure!(!data.is_empty(), Config, "empty training set");
    let mut rng = Rng::new(train.seed);
    let mut tok = Tokenizer::new(config.clone(), &mut rng.fork())?;
    let mut disc = PatchDiscriminator::new(config.image_channels, config.disc_channels, &mut rng.fork());
    if config.codebook_init == CodebookInit::Data {
        let idx: Vec<usize> = (0..train.batch_size).map(|_| rng.below(data.len())).collect();
        tok.init_codebook_from(&data.batch(&idx), &mut rng)?;
    }
    let mut opt = AdamW::new(train.optimizer());
    let mut disc_opt = AdamW::new(train.optimizer());
    let mut log = Vec::new();
    let start = Instant::now();
    for step in 0..train.steps {
        let idx: Vec<usize> = (0..train.batch_size).map(|_| rng.below(data.len())).collect();
        let x = data.batch(&idx);
        let adv = step >= config.adv_start_iter && config.lambda_g > 0.0;

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = tok.forward_tape(&mut tape, xv, true)?;
        let gen = if adv {
            let scores = disc.forward(&mut tape, out.x_hat, false)?;
            Some(generator_adv_loss(&mut tape, scores))
        } else {
            None
        };
        let recon = reconstruction_loss(&mut tape, xv, out.x_hat, config, gen)?;
        let vq = tape.add(out.codebook_loss, out.commit_loss)?;
        let loss = tape.add(recon, vq)?;
        let loss_v = tape.value(loss).item();
        if !loss_v.is_finite() {
            return Err(divergence(step, "tokenizer loss", loss_v));
        }
        let grads = tape.backward(loss)?;
        tok.params.zero_grad();
        tape.accumulate_param_grads(&grads, &mut tok.params)?;
        opt.step(&mut tok.params)?;
        tok.normalize_codebook();
        tok.usage.push(&out.indices)?;

        let x_hat = tape.value(out.x_hat).clone();
        let disc_loss = if adv { Some(disc.step(&x, &x_hat, &mut disc_opt)?.disc_loss) } else { None };
        if let Some(d) = disc_loss.filter(|d| !d.is_finite()) {
            return Err(divergence(step, "discriminator loss", d));
        }

        if step % train.log_every == 0 || step + 1 == train.steps {
            log.push(TokLogRow {
                step,
                loss: loss_v,
                recon: tape.value(recon).item(),
                codebook: tape.value(out.codebook_loss).item(),
                commit: tape.value(out.commit_loss).item(),
                gen_adv: gen.map(|g| tape.value(g).item()),
                disc: disc_loss,
                usage: tok.usage.usage()?,
                psnr: psnr(&x, &x_hat, 2.0)?,
                ssim: ssim(&x, &x_hat, 2.0)?,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    Ok(TokenizerRun { tokenizer: tok, discriminator: disc, log })
}
