//! Shared by the autograd and acceptance suites.
#![allow(dead_code)]

use std::sync::Arc;

use lgn::autograd::{grad_check, Mask2d, NormGroup, Tape, Var, L2_EPS};
use lgn::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Keeps the worst error seen per op name.
fn record(out: &mut Vec<(String, f64)>, name: &str, err: f64) {
    match out.iter_mut().find(|(n, _)| n == name) {
        Some(e) => e.1 = e.1.max(err),
        None => out.push((name.to_string(), err)),
    }
}

/// Worst max-relative gradient error of every tape op over [`SEEDS`].
pub fn op_grad_errors() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    grad_check_matmul_both_sides(&mut out);
    grad_check_binary_ops(&mut out);
    grad_check_broadcasts(&mut out);
    grad_check_unary_ops(&mut out);
    grad_check_l2_normalize(&mut out);
    grad_check_convolutions(&mut out);
    grad_check_structural_ops(&mut out);
    grad_check_masked_bce(&mut out);
    out
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Values bounded away from `points` so kinks are never straddled.
fn random_avoiding(shape: &[usize], points: &[f64], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if points.iter().all(|p| (v - p).abs() > 0.05) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Reduces `y` to a scalar with fixed random weights so every output
/// coordinate carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let shape = tape.shape(y).to_vec();
    let n = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|_| rng.random_range(0.5..1.5)).collect())?;
    let w = tape.constant(w);
    let p = tape.hadamard(y, w)?;
    tape.sum(p)
}

fn check_op<F>(out: &mut Vec<(String, f64)>, name: &str, shape: &[usize], avoid: &[f64], op: F)
where
    F: Fn(&mut Tape, Var, &mut ChaCha8Rng) -> Result<Var>,
{
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = if avoid.is_empty() {
            random(shape, &mut rng)
        } else {
            random_avoiding(shape, avoid, &mut rng)
        };
        let err = grad_check(
            |tape, xv| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
                let y = op(tape, xv, &mut rng)?;
                weighted_sum(tape, y, seed)
            },
            &x,
            1e-5,
        )
        .unwrap();
        record(out, name, err);
    }
}

pub fn const_random(tape: &mut Tape, shape: &[usize], rng: &mut ChaCha8Rng) -> Var {
    let v = random(shape, rng);
    tape.constant(v)
}

fn grad_check_matmul_both_sides(out: &mut Vec<(String, f64)>) {
    check_op(out, "matmul lhs", &[3, 4], &[], |tape, x, rng| {
        let b = const_random(tape, &[4, 2], rng);
        tape.matmul(x, b)
    });
    check_op(out, "matmul rhs", &[4, 2], &[], |tape, x, rng| {
        let a = const_random(tape, &[3, 4], rng);
        tape.matmul(a, x)
    });
}

fn grad_check_binary_ops(out: &mut Vec<(String, f64)>) {
    check_op(out, "add", &[4, 4], &[], |tape, x, rng| {
        let y = const_random(tape, &[4, 4], rng);
        tape.add(x, y)
    });
    check_op(out, "sub", &[4, 4], &[], |tape, x, rng| {
        let y = const_random(tape, &[4, 4], rng);
        tape.sub(y, x)
    });
    check_op(out, "hadamard", &[4, 4], &[], |tape, x, rng| {
        let y = const_random(tape, &[4, 4], rng);
        tape.hadamard(x, y)
    });
    check_op(out, "hadamard self", &[4, 4], &[], |tape, x, _| tape.hadamard(x, x));
}

fn grad_check_broadcasts(out: &mut Vec<(String, f64)>) {
    for axis in 0..3 {
        let shape = [3, 4, 5];
        check_op(out, "broadcast_add map", &shape, &[], |tape, x, rng| {
            let v = const_random(tape, &[shape[axis]], rng);
            tape.broadcast_add(x, v, axis)
        });
        check_op(out, "broadcast_mul map", &shape, &[], |tape, x, rng| {
            let v = const_random(tape, &[shape[axis]], rng);
            tape.broadcast_mul(x, v, axis)
        });
        check_op(out, "broadcast_mul vector", &[shape[axis]], &[], |tape, x, rng| {
            let m = const_random(tape, &shape, rng);
            tape.broadcast_mul(m, x, axis)
        });
        check_op(out, "broadcast_add vector", &[shape[axis]], &[], |tape, x, rng| {
            let m = const_random(tape, &shape, rng);
            tape.broadcast_add(m, x, axis)
        });
    }
}

fn grad_check_unary_ops(out: &mut Vec<(String, f64)>) {
    check_op(out, "scale", &[4, 4], &[], |tape, x, _| tape.scale(x, -2.5));
    check_op(out, "sigmoid", &[4, 4], &[], |tape, x, _| tape.sigmoid(x));
    check_op(out, "tanh", &[4, 4], &[], |tape, x, _| tape.tanh(x));
    check_op(out, "relu", &[4, 4], &[0.0], |tape, x, _| tape.relu(x));
    check_op(out, "clamp", &[4, 4], &[-1.0, 1.0], |tape, x, _| tape.clamp(x, -1.0, 1.0));
}

fn grad_check_l2_normalize(out: &mut Vec<(String, f64)>) {
    check_op(out, "l2 along", &[4, 3, 3], &[], |tape, x, _| tape.l2_normalize(x, NormGroup::Along(0), L2_EPS));
    check_op(out, "l2 within", &[4, 3, 3], &[], |tape, x, _| tape.l2_normalize(x, NormGroup::Within(0), L2_EPS));
    check_op(out, "l2 vector", &[6], &[], |tape, x, _| tape.l2_normalize(x, NormGroup::Along(0), L2_EPS));
}

fn grad_check_convolutions(out: &mut Vec<(String, f64)>) {
    let mask = Arc::new(Mask2d::upper_triangular(6));
    check_op(out, "conv input", &[3, 6, 6], &[], |tape, x, rng| {
        let k = const_random(tape, &[4, 3, 3, 3], rng);
        let b = const_random(tape, &[4], rng);
        tape.conv2d(x, k, b)
    });
    check_op(out, "conv kernel", &[4, 3, 3, 3], &[], |tape, k, rng| {
        let x = const_random(tape, &[3, 6, 6], rng);
        let b = const_random(tape, &[4], rng);
        tape.conv2d(x, k, b)
    });
    check_op(out, "conv bias", &[4], &[], |tape, b, rng| {
        let x = const_random(tape, &[3, 6, 6], rng);
        let k = const_random(tape, &[4, 3, 3, 3], rng);
        tape.conv2d(x, k, b)
    });
    let m = mask.clone();
    check_op(out, "masked conv input", &[3, 6, 6], &[], move |tape, x, rng| {
        let k = const_random(tape, &[4, 3, 3, 3], rng);
        let b = const_random(tape, &[4], rng);
        tape.conv2d_masked(x, k, b, &m)
    });
    let m = mask.clone();
    check_op(out, "masked conv kernel", &[4, 3, 5, 5], &[], move |tape, k, rng| {
        let x = const_random(tape, &[3, 6, 6], rng);
        let b = const_random(tape, &[4], rng);
        tape.conv2d_masked(x, k, b, &m)
    });
    check_op(out, "masked conv bias", &[4], &[], move |tape, b, rng| {
        let x = const_random(tape, &[3, 6, 6], rng);
        let k = const_random(tape, &[4, 3, 1, 1], rng);
        tape.conv2d_masked(x, k, b, &mask)
    });
}

fn grad_check_structural_ops(out: &mut Vec<(String, f64)>) {
    let mask = Arc::new(Mask2d::upper_triangular(4));
    let m = mask.clone();
    check_op(out, "mask", &[2, 4, 4], &[], move |tape, x, _| tape.mask(x, &m));
    check_op(out, "sum", &[3, 4], &[], |tape, x, _| {
        let s = tape.sum(x)?;
        tape.reshape(s, vec![1])
    });
    check_op(out, "mean", &[3, 4], &[], |tape, x, _| {
        let s = tape.mean(x)?;
        tape.reshape(s, vec![1])
    });
    check_op(out, "reshape", &[3, 4], &[], |tape, x, _| tape.reshape(x, vec![2, 6]));
    check_op(out, "concat", &[2, 3], &[], |tape, x, rng| {
        let y = const_random(tape, &[1, 3], rng);
        tape.concat(&[y, x, x])
    });
    check_op(out, "slice", &[12], &[], |tape, x, _| tape.slice(x, 3, vec![2, 3]));
    check_op(out, "gather_rows", &[5, 3], &[], |tape, x, _| tape.gather_rows(x, &[4, 1, 1, 0]));
    check_op(out, "dropout seeded", &[4, 4], &[], |tape, x, rng| tape.dropout(x, 0.5, true, rng));
}

fn grad_check_masked_bce(out: &mut Vec<(String, f64)>) {
    let mask = Arc::new(Mask2d::upper_triangular(4));
    for seed in SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Tensor::new(vec![16], (0..16).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
        let y: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
        let err = grad_check(|tape, p| tape.masked_bce(p, &y, &mask), &p, 1e-6).unwrap();
        record(out, "masked_bce", err);
    }
}

