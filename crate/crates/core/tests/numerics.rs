mod common;

use argen::numerics::gradcheck::project_to_scalar;
use argen::numerics::{finite_diff_check, Tape, Tensor};
use argen::{Error, Rng};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::eye(2));
    let j = tape.constant(Tensor::eye(2));
    let out = tape.matmul(i, j).unwrap();
    assert_eq!(tape.value(out), &Tensor::eye(2));

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).data(), &[3.0, 7.0]);

    let c = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.matmul(a, c), Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradient_tight() {
    let mut rng = Rng::new(1);
    let inputs = [rand(&[3, 4], &mut rng), rand(&[4, 2], &mut rng)];
    let r = finite_diff_check(
        |tp, v| {
            let y = tp.matmul(v[0], v[1])?;
            project_to_scalar(tp, y, 9)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn conv2d_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
    let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let ones = tape.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
    let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = tape.conv2d(ones, k, None, 2, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[4.0; 4]);

    let big = tape.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(matches!(tape.conv2d(x, big, None, 1, 0), Err(Error::Dimension(_))));
    let wrong_c = tape.constant(Tensor::zeros(&[1, 2, 1, 1]));
    assert!(tape.conv2d(x, wrong_c, None, 1, 0).is_err());
}

#[test]
fn conv2d_output_extent_formula() {
    let mut rng = Rng::new(2);
    for (h, k, s, p) in [(8, 3, 1, 1), (8, 4, 2, 1), (9, 3, 2, 0), (7, 5, 3, 2)] {
        let mut tape = Tape::new();
        let x = tape.constant(rand(&[1, 2, h, h], &mut rng));
        let w = tape.constant(rand(&[3, 2, k, k], &mut rng));
        let y = tape.conv2d(x, w, None, s, p).unwrap();
        let expect = (h + 2 * p - k) / s + 1;
        assert_eq!(tape.shape(y), &[1, 3, expect, expect]);
    }
}

#[test]
fn conv2d_gradient() {
    let mut rng = Rng::new(3);
    let inputs = [rand(&[2, 3, 8, 8], &mut rng), rand(&[2, 3, 3, 3], &mut rng), rand(&[2], &mut rng)];
    let r = finite_diff_check(
        |tp, v| {
            let y = tp.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            project_to_scalar(tp, y, 4)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn conv_transpose_is_adjoint() {
    let mut rng = Rng::new(4);
    for (s, p, k, h) in [(1, 0, 3, 6), (2, 1, 4, 8), (2, 0, 2, 6), (3, 1, 3, 7)] {
        let x = rand(&[2, 3, h, h], &mut rng);
        let w = rand(&[4, 3, k, k], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let cx = tape.conv2d(xv, wv, None, s, p).unwrap();
        let y = rand(tape.shape(cx), &mut rng);
        let yv = tape.constant(y.clone());
        let ty = tape.conv2d_transpose(yv, wv, None, s, p).unwrap();
        if tape.shape(ty) != x.shape() {
            // floor in the forward extent; adjoint only defined on exact geometry
            continue;
        }
        let lhs = tape.value(cx).dot(&y);
        let rhs = x.dot(tape.value(ty));
        assert!((lhs - rhs).abs() < 1e-8 * lhs.abs().max(1.0), "s={s} p={p}: {lhs} vs {rhs}");
    }
}

#[test]
fn conv_transpose_upsample_direct() {
    let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let w = Tensor::full(&[1, 1, 2, 2], 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let y = tape.conv2d_transpose(xv, wv, None, 2, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 4, 4]);
    // direct scatter: out[2i + a][2j + b] += x[i][j] * w[a][b]
    let mut expect = [0.0; 16];
    for i in 0..2 {
        for j in 0..2 {
            for a in 0..2 {
                for b in 0..2 {
                    expect[(2 * i + a) * 4 + 2 * j + b] += x.data()[i * 2 + j] * w.data()[a * 2 + b];
                }
            }
        }
    }
    assert_eq!(tape.value(y).data(), &expect);

    // overlapping taps with stride 2, kernel 3
    let w3 = Tensor::full(&[1, 1, 3, 3], 1.0);
    let wv3 = tape.constant(w3);
    let y3 = tape.conv2d_transpose(xv, wv3, None, 2, 0).unwrap();
    assert_eq!(tape.shape(y3), &[1, 1, 5, 5]);
    let mut expect = [0.0; 25];
    for i in 0..2 {
        for j in 0..2 {
            for a in 0..3 {
                for b in 0..3 {
                    expect[(2 * i + a) * 5 + 2 * j + b] += x.data()[i * 2 + j];
                }
            }
        }
    }
    assert_eq!(tape.value(y3).data(), &expect);
    assert_eq!(tape.value(y3).data()[2 * 5 + 2], 10.0);

    let z = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let yz = tape.conv2d_transpose(z, wv, None, 2, 0).unwrap();
    assert!(tape.value(yz).data().iter().all(|v| *v == 0.0));
}

#[test]
fn conv_transpose_gradient() {
    let mut rng = Rng::new(5);
    let inputs = [rand(&[2, 3, 4, 4], &mut rng), rand(&[3, 2, 4, 4], &mut rng), rand(&[2], &mut rng)];
    let r = finite_diff_check(
        |tp, v| {
            let y = tp.conv2d_transpose(v[0], v[1], Some(v[2]), 2, 1)?;
            project_to_scalar(tp, y, 6)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn rms_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::full(&[4], 1.0));
    for c in [2.5, -0.7] {
        let x = tape.constant(Tensor::full(&[1, 4], c));
        let y = tape.rms_norm(x, g, 1e-300).unwrap();
        for v in tape.value(y).data() {
            assert!((v - c.signum()).abs() < 1e-12);
        }
    }
    let z = tape.constant(Tensor::zeros(&[2, 4]));
    let y = tape.rms_norm(z, g, 1e-6).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    let bad = tape.constant(Tensor::full(&[3], 1.0));
    assert!(tape.rms_norm(z, bad, 1e-6).is_err());
}

#[test]
fn rms_norm_gradient() {
    let mut rng = Rng::new(7);
    let inputs = [rand(&[3, 5], &mut rng), rand(&[5], &mut rng)];
    let r = finite_diff_check(
        |tp, v| {
            let y = tp.rms_norm(v[0], v[1], 1e-6)?;
            project_to_scalar(tp, y, 8)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn swiglu_examples() {
    let mut tape = Tape::new();
    let one = |tp: &mut Tape| tp.constant(Tensor::full(&[1, 1], 1.0));
    let (x, g, u, d) = (one(&mut tape), one(&mut tape), one(&mut tape), one(&mut tape));
    let y = tape.swiglu(x, g, u, d).unwrap();
    assert!((tape.value(y).item() - 0.7310585786300049).abs() < 1e-15);

    let z = tape.constant(Tensor::zeros(&[2, 4]));
    let mut rng = Rng::new(0);
    let wg = tape.constant(rand(&[4, 8], &mut rng));
    let wu = tape.constant(rand(&[4, 8], &mut rng));
    let wd = tape.constant(rand(&[8, 4], &mut rng));
    let y = tape.swiglu(z, wg, wu, wd).unwrap();
    assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    assert!(tape.swiglu(z, wg, wd, wd).is_err());
}

#[test]
fn swiglu_gradient_llama_ratio() {
    // hidden 12, ffn = 2/3 * 4 * 12 = 32
    let mut rng = Rng::new(10);
    let inputs = [
        rand(&[3, 12], &mut rng),
        rand(&[12, 32], &mut rng),
        rand(&[12, 32], &mut rng),
        rand(&[32, 12], &mut rng),
    ];
    let r = finite_diff_check(
        |tp, v| {
            let y = tp.swiglu(v[0], v[1], v[2], v[3])?;
            project_to_scalar(tp, y, 11)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn cross_entropy_examples() {
    let k = 7;
    let mut tape = Tape::new();
    let u = tape.constant(Tensor::full(&[3, k], 0.4));
    let l = tape.softmax_cross_entropy(u, &[0, 3, 6]).unwrap();
    assert!((tape.value(l).item() - (k as f64).ln()).abs() < 1e-15);

    let mut peaked = vec![0.0; k];
    peaked[2] = 30.0;
    let p = tape.constant(t(&[1, k], &peaked));
    let l = tape.softmax_cross_entropy(p, &[2]).unwrap();
    assert!(tape.value(l).item() < 1e-12);

    assert!(matches!(tape.softmax_cross_entropy(u, &[0, 1, 7]), Err(Error::Index(_))));
}

#[test]
fn cross_entropy_direct_oracle() {
    let mut rng = Rng::new(12);
    for _ in 0..20 {
        let logits = Tensor::uniform(&[5, 9], -3.0, 3.0, &mut rng);
        let targets: Vec<usize> = (0..5).map(|_| rng.below(9)).collect();
        let mut oracle = 0.0;
        for (r, &tg) in targets.iter().enumerate() {
            let row = logits.row(r);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            oracle += -(row[tg].exp() / z).ln();
        }
        oracle /= 5.0;
        let mut tape = Tape::new();
        let lv = tape.constant(logits);
        let l = tape.softmax_cross_entropy(lv, &targets).unwrap();
        assert!((tape.value(l).item() - oracle).abs() < 1e-10);
    }
}

#[test]
fn gradients_accumulate_across_uses() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
    let y = tape.add(x, x).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[2.0, 2.0]);
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
    let d = tape.detach(x);
    let y = tape.mul(x, d).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.wrt(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn every_op_passes_gradient_check() {
    for (i, case) in common::grad_cases().iter().enumerate() {
        let worst = common::check_case(case, common::GRAD_INSTANCES, i as u64).unwrap();
        assert!(worst < common::GRAD_TOLERANCE, "{}: max relative error {worst:e}", case.name);
    }
}
