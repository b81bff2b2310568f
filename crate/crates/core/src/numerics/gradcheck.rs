//! Central finite-difference checks of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{ensure, Result};
use crate::rng::Rng;

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors, so near-zero gradients are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// `(input, element)` with the largest relative error.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences with step [`FD_STEP`], over every element of every input.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], tolerance: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        ensure!(tape.value(out).len() == 1, Dimension, "gradient check needs a scalar output");
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
        tolerance,
        passed: true,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ii, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[ii].len()];
        let analytic = grads.wrt(*var).unwrap_or(&zeros).to_vec();
        for e in 0..inputs[ii].len() {
            let orig = work[ii].data()[e];
            work[ii].data_mut()[e] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[ii].data_mut()[e] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[ii].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let rel = relative_error(analytic[e], numeric);
            report.max_abs_err = report.max_abs_err.max((analytic[e] - numeric).abs());
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ii, e);
            }
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_err < tolerance;
    Ok(report)
}

/// Reduces a tensor-valued node to `sum(y * r)` for a fixed random `r`, so
/// every output element contributes to a checked scalar.
pub fn project_to_scalar(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::new(seed);
    let shape = tape.shape(y).to_vec();
    let r = tape.constant(Tensor::uniform(&shape, -1.0, 1.0, &mut rng));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}
