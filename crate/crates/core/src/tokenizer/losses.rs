use super::config::TokenizerConfig;
use crate::error::Result;
use crate::numerics::{Tape, Var};

/// Codebook and commitment terms.
///
/// `codebook = mean_pos ||sg[f] - z||^2` trains only the codes and
/// `commit = beta * mean_pos ||f - sg[z]||^2` trains only the encoder. Rows of
/// `f` and `z` are positions.
pub fn vq_loss(tape: &mut Tape, f: Var, z_q: Var, beta: f64) -> Result<(Var, Var)> {
    let shape = tape.shape(f);
    let width = *shape.last().unwrap_or(&1);
    let positions = (tape.value(f).len() / width.max(1)).max(1) as f64;
    let sg_f = tape.detach(f);
    let d = tape.sub(sg_f, z_q)?;
    let s = tape.sum_squares(d);
    let codebook = tape.scale(s, 1.0 / positions);
    let sg_z = tape.detach(z_q);
    let d = tape.sub(f, sg_z)?;
    let s = tape.sum_squares(d);
    let commit = tape.scale(s, beta / positions);
    Ok((codebook, commit))
}

/// Identity-feature stand-in for a learned perceptual distance.
pub fn perceptual_stub(tape: &mut Tape, x: Var, x_hat: Var) -> Result<Var> {
    tape.mse(x, x_hat)
}

/// Pixel MSE, plus the weighted perceptual term, plus `lambda_g` times the
/// generator adversarial term when one is supplied.
pub fn reconstruction_loss(
    tape: &mut Tape,
    x: Var,
    x_hat: Var,
    config: &TokenizerConfig,
    generator_term: Option<Var>,
) -> Result<Var> {
    let mut loss = tape.mse(x, x_hat)?;
    if config.perceptual_weight > 0.0 {
        let p = perceptual_stub(tape, x, x_hat)?;
        let p = tape.scale(p, config.perceptual_weight);
        loss = tape.add(loss, p)?;
    }
    if let Some(g) = generator_term {
        let g = tape.scale(g, config.lambda_g);
        loss = tape.add(loss, g)?;
    }
    Ok(loss)
}
