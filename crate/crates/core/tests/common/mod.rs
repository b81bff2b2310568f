//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use argen::numerics::gradcheck::project_to_scalar;
use argen::numerics::{finite_diff_check, Tape, Tensor, Var};
use argen::{Result, Rng};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_INSTANCES: usize = 20;

type Build = fn(&mut Tape, &[Var], &mut Rng) -> Result<Var>;

/// One differentiable operation: input extents and a scalar-valued graph.
pub struct GradCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    build: Build,
}

fn case(name: &'static str, shapes: &[&[usize]], build: Build) -> GradCase {
    GradCase { name, shapes: shapes.iter().map(|s| s.to_vec()).collect(), build }
}

/// Every differentiable tape operation. Non-scalar outputs are reduced by a
/// fixed random projection.
pub fn grad_cases() -> Vec<GradCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 5]], |t, v, _| t.matmul(v[0], v[1])),
        case("add", &[&[2, 3], &[2, 3]], |t, v, _| t.add(v[0], v[1])),
        case("sub", &[&[2, 3], &[2, 3]], |t, v, _| t.sub(v[0], v[1])),
        case("mul", &[&[2, 3], &[2, 3]], |t, v, _| t.mul(v[0], v[1])),
        case("scale", &[&[5]], |t, v, _| Ok(t.scale(v[0], -1.7))),
        case("add_scalar", &[&[5]], |t, v, _| Ok(t.add_scalar(v[0], 0.3))),
        case("silu", &[&[3, 4]], |t, v, _| Ok(t.silu(v[0]))),
        case("relu", &[&[3, 4]], |t, v, _| Ok(t.relu(v[0]))),
        case("leaky_relu", &[&[3, 4]], |t, v, _| Ok(t.leaky_relu(v[0], 0.2))),
        case("add_bias", &[&[3, 4], &[4]], |t, v, _| t.add_bias(v[0], v[1])),
        case("rms_norm", &[&[3, 6], &[6]], |t, v, _| t.rms_norm(v[0], v[1], 1e-6)),
        case("group_norm", &[&[2, 4, 3, 3], &[4], &[4]], |t, v, _| {
            t.group_norm(v[0], 2, v[1], v[2], 1e-6)
        }),
        case("swiglu", &[&[3, 4], &[4, 6], &[4, 6], &[6, 4]], |t, v, _| {
            t.swiglu(v[0], v[1], v[2], v[3])
        }),
        case("softmax_cross_entropy", &[&[4, 7]], |t, v, rng| {
            let targets: Vec<usize> = (0..4).map(|_| rng.below(7)).collect();
            t.softmax_cross_entropy(v[0], &targets)
        }),
        case("conv2d", &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]], |t, v, _| {
            t.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        }),
        case("conv2d_transpose", &[&[1, 3, 3, 3], &[3, 2, 4, 4], &[2]], |t, v, _| {
            t.conv2d_transpose(v[0], v[1], Some(v[2]), 2, 1)
        }),
        case("gather_rows", &[&[5, 3]], |t, v, _| t.gather_rows(v[0], &[4, 0, 4, 2])),
        case("concat_seq", &[&[2, 3], &[4, 3]], |t, v, _| t.concat_seq(v[0], v[1], 2)),
        case("replace_rows", &[&[4, 3], &[1, 3]], |t, v, _| {
            t.replace_rows(v[0], v[1], &[false, true, false, true])
        }),
        case("rope", &[&[6, 8]], |t, v, rng| {
            let angles: Vec<f64> = (0..3 * 2).map(|_| rng.uniform_range(-3.0, 3.0)).collect();
            t.rope(v[0], &angles, 3, 2)
        }),
        case("causal_attention", &[&[6, 8], &[6, 8], &[6, 8]], |t, v, _| {
            t.causal_attention(v[0], v[1], v[2], 2, 2)
        }),
        case("l2_normalize", &[&[3, 4]], |t, v, _| Ok(t.l2_normalize(v[0], 1e-12))),
        case("sum", &[&[2, 3]], |t, v, _| Ok(t.sum(v[0]))),
        case("mean", &[&[2, 3]], |t, v, _| Ok(t.mean(v[0]))),
        case("sum_squares", &[&[2, 3]], |t, v, _| Ok(t.sum_squares(v[0]))),
        case("mse", &[&[2, 3], &[2, 3]], |t, v, _| t.mse(v[0], v[1])),
        case("nchw_to_rows", &[&[2, 3, 2, 2]], |t, v, _| t.nchw_to_rows(v[0])),
        case("rows_to_nchw", &[&[8, 3]], |t, v, _| t.rows_to_nchw(v[0], 2, 2, 2)),
        case("dropout", &[&[3, 4]], |t, v, rng| Ok(t.dropout(v[0], 0.3, rng))),
        case("reshape", &[&[2, 6]], |t, v, _| t.reshape(v[0], &[3, 4])),
    ]
}

/// Worst relative error of `case` over `instances` random draws.
pub fn check_case(case: &GradCase, instances: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let s = seed.wrapping_mul(1000).wrapping_add(i as u64);
        let mut rng = Rng::new(s);
        let inputs: Vec<Tensor> = case.shapes.iter().map(|sh| Tensor::uniform(sh, -1.0, 1.0, &mut rng)).collect();
        let build = case.build;
        let report = finite_diff_check(
            |tape, vars| {
                // Same randomness for every evaluation of this instance.
                let mut r = Rng::new(s ^ 0x5eed);
                let y = build(tape, vars, &mut r)?;
                if tape.value(y).len() == 1 {
                    Ok(y)
                } else {
                    project_to_scalar(tape, y, s)
                }
            },
            &inputs,
            GRAD_TOLERANCE,
        )?;
        worst = worst.max(report.max_rel_err);
    }
    Ok(worst)
}
