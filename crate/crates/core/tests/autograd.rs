mod common;

use std::sync::Arc;

use common::{const_random, op_grad_errors, random, SEEDS};
use lgn::autograd::{grad_check, sigmoid, Mask2d, NormGroup, Tape, Var, L2_EPS};
use lgn::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    assert_eq!(tape.shape(c), &[2, 1]);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let bm = random(&[3, 4], &mut rng);
    let i = tape.constant(Tensor::eye(3));
    let bv = tape.constant(bm.clone());
    let out = tape.matmul(i, bv).unwrap();
    assert!(tape.value(out).bit_eq(&bm));

    let x = tape.constant(Tensor::zeros(vec![2, 3]));
    match tape.matmul(x, x) {
        Err(Error::Dimension { lhs, rhs, .. }) => assert_eq!((lhs, rhs), (vec![2, 3], vec![2, 3])),
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[1], &[0.0]));
    let s = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5]);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.25]);

    let mut tape = Tape::new();
    let a = tape.constant(t(&[2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2], &[3.0, -1.0]));
    let h = tape.hadamard(a, b).unwrap();
    assert_eq!(tape.value(h).data(), &[3.0, -2.0]);
    let ones = tape.constant(Tensor::ones(vec![2]));
    let same = tape.hadamard(a, ones).unwrap();
    assert_eq!(tape.value(same).data(), &[1.0, 2.0]);

    let c = tape.constant(Tensor::zeros(vec![3]));
    assert!(matches!(tape.add(a, c), Err(Error::Dimension { .. })));
    assert!(matches!(tape.broadcast_mul(a, c, 0), Err(Error::Dimension { .. })));

    assert_eq!(sigmoid(-800.0), 0.0);
    assert_eq!(sigmoid(800.0), 1.0);
}

#[test]
fn l2_normalize_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2], &[3.0, 4.0]));
    let y = tape.l2_normalize(x, NormGroup::Along(0), L2_EPS).unwrap();
    let d = tape.value(y).data();
    assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);

    let z = tape.constant(Tensor::zeros(vec![3]));
    let zn = tape.l2_normalize(z, NormGroup::Along(0), L2_EPS).unwrap();
    assert_eq!(tape.value(zn).data(), &[0.0, 0.0, 0.0]);

    let u = t(&[3], &[0.6, 0.0, -0.8]);
    let uv = tape.constant(u.clone());
    let un = tape.l2_normalize(uv, NormGroup::Along(0), L2_EPS).unwrap();
    assert!(tape.value(un).max_abs_diff(&u).unwrap() <= 1e-12);

    // cells across channels vs whole channel planes
    let m = tape.constant(t(&[2, 1, 2], &[3.0, 1.0, 4.0, 0.0]));
    let cells = tape.l2_normalize(m, NormGroup::Along(0), L2_EPS).unwrap();
    assert_eq!(tape.value(cells).data(), &[0.6, 1.0, 0.8, 0.0]);
    let planes = tape.l2_normalize(m, NormGroup::Within(0), L2_EPS).unwrap();
    let p = tape.value(planes).data();
    let r10 = 10f64.sqrt();
    assert!((p[0] - 3.0 / r10).abs() < 1e-15 && (p[1] - 1.0 / r10).abs() < 1e-15);
    assert_eq!(&p[2..], &[1.0, 0.0]);
}

#[test]
fn conv2d_examples() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xt = random(&[1, 4, 5], &mut rng);
    let x = tape.constant(xt.clone());
    let k = tape.constant(Tensor::ones(vec![1, 1, 1, 1]));
    let b = tape.constant(Tensor::zeros(vec![1]));
    let y = tape.conv2d(x, k, b).unwrap();
    assert!(tape.value(y).bit_eq(&xt));

    let c = 1.25;
    let x = tape.constant(Tensor::full(vec![1, 5, 5], c));
    let k = tape.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let y = tape.conv2d(x, k, b).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[2 * 5 + 2], 9.0 * c);
    assert_eq!(v[0], 4.0 * c);

    let x2 = tape.constant(Tensor::zeros(vec![2, 5, 5]));
    assert!(matches!(tape.conv2d(x2, k, b), Err(Error::Dimension { .. })));
    let even = tape.constant(Tensor::ones(vec![1, 1, 2, 2]));
    assert!(tape.conv2d(x, even, b).is_err());
}

#[test]
fn masked_conv_equals_masked_full_conv() {
    let mask = Arc::new(Mask2d::upper_triangular(6));
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let x = const_random(&mut tape, &[3, 6, 6], &mut rng);
        let k = const_random(&mut tape, &[4, 3, 3, 3], &mut rng);
        let b = const_random(&mut tape, &[4], &mut rng);
        let full = tape.conv2d(x, k, b).unwrap();
        let full = tape.mask(full, &mask).unwrap();
        let masked = tape.conv2d_masked(x, k, b, &mask).unwrap();
        assert!(tape.value(full).bit_eq(tape.value(masked)));
    }
}

#[test]
fn dropout_behaviour() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new();
    let n = 100_000;
    let input = Tensor::new(vec![n], (0..n).map(|_| rng.random_range(0.5..1.5)).collect()).unwrap();
    let x = tape.constant(input.clone());

    let eval = tape.dropout(x, 0.75, false, &mut rng).unwrap();
    assert!(tape.value(eval).bit_eq(&input));
    let zero = tape.dropout(x, 0.0, true, &mut rng).unwrap();
    assert!(tape.value(zero).bit_eq(&input));
    assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(Error::Config(_))));
    assert!(matches!(tape.dropout(x, -0.1, true, &mut rng), Err(Error::Config(_))));

    let y = tape.dropout(x, 0.75, true, &mut rng).unwrap();
    let out = tape.value(y).data();
    let survivors = out.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
    assert!((survivors - 0.25).abs() <= 0.01, "survivor fraction {survivors}");
    let mean_in = input.sum() / n as f64;
    let mean_out = out.iter().sum::<f64>() / n as f64;
    assert!((mean_out / mean_in - 1.0).abs() <= 0.02, "mean {mean_out} vs {mean_in}");
    for (o, i) in out.iter().zip(input.data()) {
        assert!(*o == 0.0 || (o - 4.0 * i).abs() < 1e-12);
    }
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 2.0]));
    let y = tape.param(t(&[2], &[-3.0, 5.0]));
    let unused = tape.param(t(&[2], &[9.0, 9.0]));
    let h = tape.hadamard(x, y).unwrap();
    let s = tape.sum(h).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[-3.0, 5.0]);
    assert_eq!(tape.grad(y).unwrap().data(), &[1.0, 2.0]);
    assert_eq!(tape.grad(unused).unwrap().data(), &[0.0, 0.0]);
    assert!(matches!(tape.backward(s), Err(Error::Tape(_))));
    tape.reset_grads();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[-3.0, 5.0]);

    let mut tape = Tape::new();
    let v = tape.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(v), Err(Error::Shape(_))));

    let mut other = Tape::new();
    let foreign = other.param(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(foreign), Err(Error::Tape(_))));
    assert!(matches!(tape.add(v, foreign), Err(Error::Tape(_))));
}

#[test]
fn grad_check_reference_functions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in SEEDS {
        let x = random(&[3, 4], &mut rng);
        let err = grad_check(
            |tape, x| {
                let sq = tape.hadamard(x, x)?;
                tape.sum(sq)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-6, "sum(x^2): {err:e}");

        let err = grad_check(|tape, _x| Ok(tape.constant(Tensor::scalar(4.2))), &x, 1e-3).unwrap();
        assert!(err <= 1e-8);
    }
}

#[test]
fn grad_check_flags_nondeterminism() {
    let x = random(&[64], &mut ChaCha8Rng::seed_from_u64(9));
    let res = grad_check(
        |tape, x| {
            let mut rng = rand::rng();
            let y = tape.dropout(x, 0.5, true, &mut rng)?;
            tape.sum(y)
        },
        &x,
        1e-3,
    );
    assert!(matches!(res, Err(Error::Determinism(_))));
}

#[test]
fn every_op_passes_grad_check() {
    let errors = op_grad_errors();
    assert!(errors.len() >= 30);
    for (name, err) in errors {
        assert!(err <= TOL, "{name}: relative error {err:e}");
    }
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

proptest! {
    #[test]
    fn hadamard_commutes_and_has_unit(a in vec_strategy(6), b in vec_strategy(6)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(a.clone()));
        let y = tape.constant(Tensor::vector(b));
        let ones = tape.constant(Tensor::ones(vec![6]));
        let xy = tape.hadamard(x, y).unwrap();
        let yx = tape.hadamard(y, x).unwrap();
        prop_assert!(tape.value(xy).bit_eq(tape.value(yx)));
        let x1 = tape.hadamard(x, ones).unwrap();
        prop_assert_eq!(tape.value(x1).data(), a.as_slice());
    }

    #[test]
    fn l2_groups_are_unit_or_zero(data in vec_strategy(24), zero_cell in 0usize..6, along in any::<bool>()) {
        let mut data = data;
        for c in 0..4 {
            data[c * 6 + zero_cell] = 0.0;
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![4, 2, 3], data).unwrap());
        let group = if along { NormGroup::Along(0) } else { NormGroup::Within(0) };
        let y = tape.l2_normalize(x, group, L2_EPS).unwrap();
        let v = tape.value(y).data();
        let norms: Vec<f64> = if along {
            (0..6).map(|i| (0..4).map(|c| v[c * 6 + i].powi(2)).sum::<f64>().sqrt()).collect()
        } else {
            (0..4).map(|c| v[c * 6..(c + 1) * 6].iter().map(|e| e * e).sum::<f64>().sqrt()).collect()
        };
        for n in norms {
            prop_assert!(n == 0.0 || (n - 1.0).abs() <= 1e-9, "norm {}", n);
        }
    }

    #[test]
    fn backward_is_linear(xs in vec_strategy(5), ws in vec_strategy(5), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        fn f(tape: &mut Tape, x: Var, w: Var) -> Var {
            let t = tape.tanh(x).unwrap();
            let h = tape.hadamard(t, w).unwrap();
            tape.sum(h).unwrap()
        }
        fn g(tape: &mut Tape, x: Var) -> Var {
            let s = tape.sigmoid(x).unwrap();
            let h = tape.hadamard(s, x).unwrap();
            tape.sum(h).unwrap()
        }
        let grad_of = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.param(Tensor::vector(xs.clone()));
            let w = tape.constant(Tensor::vector(ws.clone()));
            let loss = match which {
                0 => f(&mut tape, x, w),
                1 => g(&mut tape, x),
                _ => {
                    let fv = f(&mut tape, x, w);
                    let gv = g(&mut tape, x);
                    let fa = tape.scale(fv, a).unwrap();
                    let gb = tape.scale(gv, b).unwrap();
                    tape.add(fa, gb).unwrap()
                }
            };
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().clone()
        };
        let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..5 {
            let expected = a * gf.data()[i] + b * gg.data()[i];
            prop_assert!((gc.data()[i] - expected).abs() <= 1e-10);
        }
    }
}
