use super::model::{add_conv, ConvIds};
use crate::error::{ensure, Result};
use crate::numerics::{AdamW, ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;

const LEAK: f64 = 0.2;

/// Small patch classifier: two stride-2 4x4 convs with leaky ReLU and a 3x3
/// head producing one score per patch, `[n, 1, H/4, W/4]`.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    pub params: ParamStore,
    layers: [ConvIds; 3],
}

/// Outcome of one discriminator update.
#[derive(Clone, Copy, Debug)]
pub struct DiscStep {
    pub disc_loss: f64,
    /// `-mean(D(x_hat))` before the update.
    pub gen_term: f64,
}

impl PatchDiscriminator {
    pub fn new(image_channels: usize, width: usize, rng: &mut Rng) -> Self {
        let mut s = ParamStore::new();
        let layers = [
            add_conv(&mut s, "disc.0", image_channels, width, 4, false, rng),
            add_conv(&mut s, "disc.1", width, width * 2, 4, false, rng),
            add_conv(&mut s, "disc.2", width * 2, 1, 3, false, rng),
        ];
        Self { params: s, layers }
    }

    /// Patch scores. With `train` false the weights are constants, so only
    /// the input receives gradient.
    pub fn forward(&self, tape: &mut Tape, x: Var, train: bool) -> Result<Var> {
        let s = tape.shape(x);
        ensure!(
            s.len() == 4 && s[2] >= 4 && s[3] >= 4,
            Dimension,
            "discriminator needs NCHW images of at least 4x4, got {:?}",
            s
        );
        let mut h = x;
        for (i, ids) in self.layers.iter().enumerate() {
            let (w, b) = if train {
                (tape.param(&self.params, ids.w), tape.param(&self.params, ids.b))
            } else {
                (tape.frozen_param(&self.params, ids.w), tape.frozen_param(&self.params, ids.b))
            };
            let (stride, pad) = if i < 2 { (2, 1) } else { (1, 1) };
            h = tape.conv2d(h, w, Some(b), stride, pad)?;
            if i < 2 {
                h = tape.leaky_relu(h, LEAK);
            }
        }
        Ok(h)
    }

    /// Hinge update on a real and a reconstructed batch.
    pub fn step(&mut self, x: &Tensor, x_hat: &Tensor, opt: &mut AdamW) -> Result<DiscStep> {
        let mut tape = Tape::new();
        let xr = tape.constant(x.clone());
        let xf = tape.constant(x_hat.clone());
        let real = self.forward(&mut tape, xr, true)?;
        let fake = self.forward(&mut tape, xf, true)?;
        let loss = hinge_disc_loss(&mut tape, real, fake)?;
        let gen = generator_adv_loss(&mut tape, fake);
        let disc_loss = tape.value(loss).item();
        let gen_term = tape.value(gen).item();
        let grads = tape.backward(loss)?;
        self.params.zero_grad();
        tape.accumulate_param_grads(&grads, &mut self.params)?;
        opt.step(&mut self.params)?;
        Ok(DiscStep { disc_loss, gen_term })
    }
}

/// `0.5 * (mean relu(1 - D(x)) + mean relu(1 + D(x_hat)))`.
pub fn hinge_disc_loss(tape: &mut Tape, real: Var, fake: Var) -> Result<Var> {
    let r = tape.scale(real, -1.0);
    let r = tape.add_scalar(r, 1.0);
    let r = tape.relu(r);
    let r = tape.mean(r);
    let f = tape.add_scalar(fake, 1.0);
    let f = tape.relu(f);
    let f = tape.mean(f);
    let s = tape.add(r, f)?;
    Ok(tape.scale(s, 0.5))
}

/// `-mean(D(x_hat))`.
pub fn generator_adv_loss(tape: &mut Tape, fake: Var) -> Var {
    let m = tape.mean(fake);
    tape.scale(m, -1.0)
}

/// One discriminator step; returns the discriminator loss and the generator
/// term for the same batch.
pub fn patch_discriminator_step(
    x: &Tensor,
    x_hat: &Tensor,
    disc: &mut PatchDiscriminator,
    opt: &mut AdamW,
) -> Result<(f64, f64)> {
    let s = disc.step(x, x_hat, opt)?;
    Ok((s.disc_loss, s.gen_term))
}
