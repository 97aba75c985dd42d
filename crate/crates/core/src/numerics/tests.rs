use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

// Reference loops used as oracles.

fn naive_linear(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut y = vec![0.0; n * o];
    for i in 0..n {
        for j in 0..o {
            let mut acc = b.data()[j];
            for k in 0..d {
                acc += w.at(&[j, k]) * x.at(&[i, k]);
            }
            y[i * o + j] = acc;
        }
    }
    y
}

fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, ks) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut y = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[o];
                for ci in 0..c {
                    for ky in 0..ks {
                        for kx in 0..ks {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += k.at(&[o, ci, ky, kx]) * x.at(&[ci, iy as usize, ix as usize]);
                            }
                        }
                    }
                }
                y[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    y
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn linear_identity_and_bias() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[1, 3]));
    let w = tape.constant(Tensor::eye(3));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0]);

    let x = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
    let w = tape.constant(t64(&[1, 2], &[0.0, 0.0]));
    let b = tape.constant(t64(&[1], &[5.0]));
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0]);
}

#[test]
fn linear_shape_mismatch_names_shapes() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[2, 3]));
    let w = tape.constant(Tensor::ones(&[4, 5]));
    match tape.linear(x, w, None) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn linear_matches_naive_loop() {
    let mut r = rng(1);
    let x = Tensor::<f64>::uniform(&[2, 4], 1.0, &mut r);
    let w = Tensor::<f64>::uniform(&[3, 4], 1.0, &mut r);
    let b = Tensor::<f64>::uniform(&[3], 1.0, &mut r);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let y = tape.linear(xv, wv, Some(bv)).unwrap();
    assert!(max_diff(tape.value(y).data(), &naive_linear(&x, &w, &b)) < 1e-6);
}

#[test]
fn conv_identity_and_constant_preservation() {
    let mut r = rng(2);
    let x = Tensor::<f64>::uniform(&[1, 5, 5], 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let k = tape.constant(Tensor::ones(&[1, 1, 1, 1]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(xv, k, Some(b), 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);

    let c = tape.constant(Tensor::full(&[1, 5, 5], 3.0));
    let avg = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0));
    let y = tape.conv2d(c, avg, Some(b), 1, 1).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[1, 5, 5]);
    for yy in 1..4 {
        for xx in 1..4 {
            assert!((out.at(&[0, yy, xx]) - 3.0).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_rejects_even_kernel_and_empty_output() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[1, 4, 4]));
    let k2 = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
    assert!(matches!(tape.conv2d(x, k2, None, 1, 0), Err(Error::Config(_))));
    let small = tape.constant(Tensor::ones(&[1, 2, 2]));
    let k5 = tape.constant(Tensor::ones(&[1, 1, 5, 5]));
    assert!(matches!(tape.conv2d(small, k5, None, 1, 0), Err(Error::Config(_))));
}

#[test]
fn conv_matches_naive_loop() {
    let mut r = rng(3);
    let x = Tensor::<f64>::uniform(&[2, 5, 5], 1.0, &mut r);
    let k = Tensor::<f64>::uniform(&[3, 2, 3, 3], 1.0, &mut r);
    let b = Tensor::<f64>::uniform(&[3], 1.0, &mut r);
    for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
        assert!(max_diff(tape.value(y).data(), &naive_conv(&x, &k, &b, stride, pad)) < 1e-5);
    }
}

#[test]
fn linear_and_conv_agree_with_naive_on_random_cases() {
    let mut r = rng(4);
    for _ in 0..100 {
        let n = r.gen_range(1..4);
        let d = r.gen_range(1..6);
        let o = r.gen_range(1..5);
        let x = Tensor::<f64>::uniform(&[n, d], 2.0, &mut r);
        let w = Tensor::<f64>::uniform(&[o, d], 2.0, &mut r);
        let b = Tensor::<f64>::uniform(&[o], 2.0, &mut r);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.linear(xv, wv, Some(bv)).unwrap();
        assert!(max_diff(tape.value(y).data(), &naive_linear(&x, &w, &b)) < 1e-5);

        let c = r.gen_range(1..3);
        let co = r.gen_range(1..3);
        let ks = [1, 3][r.gen_range(0..2)];
        let hw = r.gen_range(ks..7);
        let pad = r.gen_range(0..2);
        let stride = r.gen_range(1..3);
        let x = Tensor::<f64>::uniform(&[c, hw, hw], 2.0, &mut r);
        let k = Tensor::<f64>::uniform(&[co, c, ks, ks], 2.0, &mut r);
        let b = Tensor::<f64>::uniform(&[co], 2.0, &mut r);
        let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
        assert!(max_diff(tape.value(y).data(), &naive_conv(&x, &k, &b, stride, pad)) < 1e-5);
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let u = tape.constant(Tensor::zeros(&[3]));
    let s = tape.softmax(u);
    for &v in tape.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = tape.constant(t64(&[2], &[1000.0, 0.0]));
    let s = tape.softmax(big);
    let out = tape.value(s).data();
    assert!(out.iter().all(|v| v.is_finite()));
    assert!((out[0] - 1.0).abs() < 1e-12 && out[1] < 1e-300);

    let mut r = rng(5);
    let x = Tensor::<f64>::uniform(&[4], 3.0, &mut r);
    let v = tape.constant(x.clone());
    let s = tape.softmax(v);
    let m = x.data().iter().copied().fold(f64::MIN, f64::max);
    let e: Vec<f64> = x.data().iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let direct: Vec<f64> = e.iter().map(|v| v / z).collect();
    assert!(max_diff(tape.value(s).data(), &direct) < 1e-7);
}

#[test]
fn elementwise_closed_forms() {
    assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
    assert_eq!(Activation::Tanh.apply(0.0f64), 0.0);
    assert_eq!(Activation::Relu6.apply(7.0f64), 6.0);
    assert_eq!(Activation::Relu6.apply(-1.0f64), 0.0);
    assert!((Activation::Softplus.apply(0.0f64) - 2f64.ln()).abs() < 1e-15);
    // derivatives against closed forms at a handful of points
    for &x in &[-3.0f64, -0.5, 0.25, 2.0, 5.5] {
        let s = 1.0 / (1.0 + (-x).exp());
        assert!((Activation::Sigmoid.derivative(x, s) - s * (1.0 - s)).abs() < 1e-15);
        let t = x.tanh();
        assert!((Activation::Tanh.derivative(x, t) - (1.0 - t * t)).abs() < 1e-15);
        assert!((Activation::Softplus.derivative(x, 0.0) - s).abs() < 1e-15);
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 3], &[1.0, 2.0, 3.0]));
    let g = tape.constant(Tensor::ones(&[3]));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    let out = tape.value(y).data();
    let mean: f64 = out.iter().sum::<f64>() / 3.0;
    let var: f64 = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-4);

    let g0 = tape.constant(Tensor::zeros(&[3]));
    let beta = tape.constant(t64(&[3], &[0.5, -1.0, 2.0]));
    let y = tape.layer_norm(x, g0, beta, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, -1.0, 2.0]);

    let mut r = rng(6);
    let x = Tensor::<f64>::uniform(&[3, 5], 2.0, &mut r);
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::ones(&[5]));
    let b = tape.constant(Tensor::zeros(&[5]));
    let y = tape.layer_norm(xv, g, b, 1e-5).unwrap();
    let mut oracle = Vec::new();
    for row in x.data().chunks(5) {
        let mean = row.iter().sum::<f64>() / 5.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
        oracle.extend(row.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()));
    }
    assert!(max_diff(tape.value(y).data(), &oracle) < 1e-6);
}

#[test]
fn upsample_examples() {
    let mut r = rng(7);
    let x = Tensor::<f64>::uniform(&[2, 3, 3], 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.upsample_nearest(xv, 1).unwrap();
    assert_eq!(tape.value(y), &x);

    let seven = tape.constant(Tensor::full(&[1, 1, 1], 7.0));
    let y = tape.upsample_nearest(seven, 3).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(&[1, 3, 3], 7.0));

    assert!(matches!(tape.upsample_nearest(xv, 0), Err(Error::Config(_))));

    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let y = tape.upsample_nearest(xv, 3).unwrap();
    let s = tape.sum_all(y);
    tape.backward(s);
    assert!(tape.grad(xv).unwrap().data().iter().all(|&g| g == 9.0));
}

#[test]
fn grad_check_linear_and_softmax() {
    let mut r = rng(8);
    let inputs = vec![
        Tensor::<f64>::uniform(&[2, 3], 1.0, &mut r),
        Tensor::<f64>::uniform(&[4, 3], 1.0, &mut r),
        Tensor::<f64>::uniform(&[4], 1.0, &mut r),
    ];
    let rep = grad_check("linear", |t, v| t.linear(v[0], v[1], Some(v[2])), &inputs, 1e-5).unwrap();
    assert!(rep.passed, "{rep}");
    assert!(rep.max_rel_error < 1e-5);

    let inputs = vec![Tensor::<f64>::uniform(&[3, 4], 2.0, &mut r)];
    let rep = grad_check("softmax", |t, v| Ok(t.softmax(v[0])), &inputs, 1e-5).unwrap();
    assert!(rep.passed, "{rep}");
}

#[test]
fn grad_check_flags_a_doubled_gradient() {
    let mut r = rng(9);
    let inputs = vec![Tensor::<f64>::uniform(&[5], 1.0, &mut r)];
    let rep = grad_check("doubled", |t, v| doubled_backward(t, v[0]), &inputs, 1e-4).unwrap();
    assert!(!rep.passed);
    assert!((rep.max_rel_error - 0.5).abs() < 1e-6, "{rep}");
}

#[test]
fn grad_check_reports_non_finite_location() {
    let inputs = vec![t64(&[2], &[1.0, 0.0])];
    let rep = grad_check(
        "normalize_zero_sum",
        |t, v| {
            let neg = t.scale(v[0], -1.0);
            let s = t.add(v[0], neg)?;
            let shifted = t.add_const(s, &t64(&[2], &[1e-300, -1e-300]))?;
            let p = t.normalize_sum(shifted);
            match p {
                Ok(p) => Ok(p),
                Err(_) => Ok(t.scale(v[0], f64::NAN)),
            }
        },
        &inputs,
        1e-4,
    )
    .unwrap();
    assert!(!rep.passed);
    assert!(rep.failure.is_some());
}

/// Every differentiable op, three random small shapes each.
#[test]
fn every_op_passes_grad_check_at_three_shapes() {
    for rep in crate::suite::op_suite(10).unwrap() {
        assert!(rep.passed, "{rep}");
    }
}

#[test]
fn dropout_is_identity_when_off_and_unbiased_when_on() {
    let mut r = rng(11);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[200, 50]));
    assert_eq!(dropout(&mut tape, x, 0.0, true, &mut r).unwrap(), x);
    assert_eq!(dropout(&mut tape, x, 0.5, false, &mut r).unwrap(), x);
    let y = dropout(&mut tape, x, 0.25, true, &mut r).unwrap();
    let mean = tape.value(y).sum() / 10_000.0;
    assert!((mean - 1.0).abs() < 0.05);
    assert!(dropout(&mut tape, x, 1.0, true, &mut r).is_err());
}

#[test]
fn ops_on_finite_inputs_stay_finite() {
    let mut r = rng(12);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::uniform(&[4, 8], 50.0, &mut r));
    let s = tape.softmax(x);
    let g = tape.constant(Tensor::ones(&[8]));
    let b = tape.constant(Tensor::zeros(&[8]));
    let ln = tape.layer_norm(x, g, b, 1e-5).unwrap();
    let sp = tape.softplus(x);
    let sg = tape.sigmoid(x);
    for v in [s, ln, sp, sg] {
        assert!(tape.value(v).is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..=8, cols in 1usize..=64, seed in any::<u64>(), scale in 0.1f64..100.0) {
        let mut r = rng(seed);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::uniform(&[rows, cols], scale, &mut r));
        let s = tape.softmax(x);
        for row in tape.value(s).data().chunks(cols) {
            let total: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
