mod common;

use common::{fd_grad, flat, max_rel_err, naive_mlp, rand_tensor, rng};
use dgr_core::model::{Activation, LayerParams, Mlp};
use dgr_core::{grad_of_grad_norm_exact, smoothed_norm, Error, Result, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

/// Step of every central difference in this file.
const H: f64 = 1e-4;
/// Relative-error tolerance of the first-order checks.
const TOL: f64 = 1e-5;
/// Denominator floor of the relative error; only guards components that
/// are exactly zero on both sides.
const FLOOR: f64 = 1e-8;

/// Contracts `build`'s output with a fixed random weight so that every
/// output entry contributes, then compares the tape gradient of every
/// input with central differences. Returns the largest relative error.
fn check_op(seed: u64, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut r = rng(seed ^ 0x5eed);
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).shape()
    };
    let weight = rand_tensor(&mut r, shape[0], shape[1], 1.0);
    let scalar = |tape: &mut Tape, vars: &[Var]| -> Var {
        let out = build(tape, vars).unwrap();
        let w = tape.constant(weight.clone());
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod).unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let s = scalar(&mut tape, &vars);
    let analytic = tape.backward(s, &vars).unwrap();
    let numeric = fd_grad(
        |ts| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ts.iter().map(|t| tape.param(t.clone())).collect();
            let s = scalar(&mut tape, &vars);
            tape.value(s).item()
        },
        &inputs,
        H,
    );
    max_rel_err(&flat(&analytic), &flat(&numeric), FLOOR)
}

/// Entries with magnitude in `[lo, hi)` and random sign.
fn away_from_zero(seed: u64, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let mut r = rng(seed);
    let v = (0..rows * cols).map(|_| r.random_range(lo..hi) * if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    Tensor::new(rows, cols, v).unwrap()
}

fn t(seed: u64, rows: usize, cols: usize) -> Tensor {
    rand_tensor(&mut rng(seed), rows, cols, 2.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn matmul_matches_fd(seed in any::<u64>(), m in 1usize..5, k in 1usize..5, n in 1usize..5) {
        let e = check_op(seed, vec![t(seed, m, k), t(seed + 1, k, n)], |tp, v| tp.matmul(v[0], v[1]));
        prop_assert!(e <= TOL, "relative error {e}");
    }

    #[test]
    fn transpose_matches_fd(seed in any::<u64>(), m in 1usize..5, n in 1usize..5) {
        let e = check_op(seed, vec![t(seed, m, n)], |tp, v| tp.transpose(v[0]));
        prop_assert!(e <= TOL, "relative error {e}");
    }

    #[test]
    fn add_sub_mul_match_fd(seed in any::<u64>(), m in 1usize..5, n in 1usize..5) {
        let ins = vec![t(seed, m, n), t(seed + 1, m, n)];
        for e in [
            check_op(seed, ins.clone(), |tp, v| tp.add(v[0], v[1])),
            check_op(seed, ins.clone(), |tp, v| tp.sub(v[0], v[1])),
            check_op(seed, ins, |tp, v| tp.mul(v[0], v[1])),
        ] {
            prop_assert!(e <= TOL, "relative error {e}");
        }
    }

    #[test]
    fn div_matches_fd(seed in any::<u64>(), m in 1usize..5, n in 1usize..5) {
        let e = check_op(seed, vec![t(seed, m, n), away_from_zero(seed + 1, m, n, 0.5, 2.0)], |tp, v| tp.div(v[0], v[1]));
        prop_assert!(e <= TOL, "relative error {e}");
    }

    #[test]
    fn row_and_column_broadcasts_match_fd(seed in any::<u64>(), m in 1usize..5, n in 1usize..5) {
        for e in [
            check_op(seed, vec![t(seed, m, n), t(seed + 1, 1, n)], |tp, v| tp.add_row(v[0], v[1])),
            check_op(seed, vec![t(seed, m, n)], |tp, v| tp.sum_rows(v[0])),
            check_op(seed, vec![t(seed, 1, n)], |tp, v| tp.broadcast_rows(v[0], m)),
            check_op(seed, vec![t(seed, m, n)], |tp, v| tp.sum_cols(v[0])),
            check_op(seed, vec![t(seed, m, 1)], |tp, v| tp.broadcast_cols(v[0], n)),
            check_op(seed, vec![t(seed, m, n)], |tp, v| tp.sum(v[0])),
        ] {
            prop_assert!(e <= TOL, "relative error {e}");
        }
    }

    #[test]
    fn scalings_match_fd(seed in any::<u64>(), m in 1usize..5, n in 1usize..5, c in -3.0f64..3.0) {
        for e in [
            check_op(seed, vec![t(seed, m, n)], |tp, v| tp.scale(v[0], c)),
            check_op(seed, vec![t(seed, m, n), t(seed + 1, 1, 1)], |tp, v| tp.scale_by(v[0], v[1])),
        ] {
            prop_assert!(e <= TOL, "relative error {e}");
        }
    }

    #[test]
    fn activations_match_fd(seed in any::<u64>(), m in 1usize..5, n in 1usize..5) {
        for e in [
            // Kept well clear of the kink at zero.
            check_op(seed, vec![away_from_zero(seed, m, n, 0.05, 2.0)], |tp, v| tp.relu(v[0])),
            check_op(seed, vec![t(seed, m, n)], |tp, v| tp.tanh(v[0])),
            check_op(seed, vec![t(seed, m, n)], |tp, v| tp.softmax(v[0])),
            check_op(seed, vec![away_from_zero(seed, m, n, 0.2, 3.0).map(f64::abs)], |tp, v| tp.sqrt(v[0])),
        ] {
            prop_assert!(e <= TOL, "relative error {e}");
        }
    }

    #[test]
    fn losses_match_fd(seed in any::<u64>(), m in 1usize..6, c in 2usize..5) {
        let mut r = rng(seed);
        let labels: Vec<usize> = (0..m).map(|_| r.random_range(0..c)).collect();
        for e in [
            check_op(seed, vec![t(seed, m, c)], |tp, v| tp.softmax_cross_entropy(v[0], &labels)),
            check_op(seed, vec![t(seed, m, 1), t(seed + 1, m, 1)], |tp, v| tp.squared_error(v[0], v[1])),
        ] {
            prop_assert!(e <= TOL, "relative error {e}");
        }
    }

    #[test]
    fn backward_is_linear(seed in any::<u64>(), m in 1usize..5, n in 1usize..5) {
        let a = t(seed, m, n);
        let b = t(seed + 1, n, m);
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(a), tape.param(b));
        let p = tape.matmul(va, vb).unwrap();
        let th = tape.tanh(p).unwrap();
        let f1 = tape.sum(th).unwrap();
        let sq = tape.mul(va, va).unwrap();
        let f2 = tape.sum(sq).unwrap();
        let both = tape.add(f1, f2).unwrap();
        let g1 = tape.backward(f1, &[va, vb]).unwrap();
        let g2 = tape.backward(f2, &[va, vb]).unwrap();
        let g = tape.backward(both, &[va, vb]).unwrap();
        for i in 0..2 {
            for ((x, y), z) in g1[i].values().iter().zip(g2[i].values()).zip(g[i].values()) {
                prop_assert!((x + y - z).abs() <= 1e-12 * (1.0 + z.abs()));
            }
        }
    }

    #[test]
    fn replay_is_deterministic(seed in any::<u64>(), m in 1usize..5, n in 1usize..5) {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(m, n));
        let w = tape.param(t(seed, n, 3));
        let h = tape.matmul(x, w).unwrap();
        let s = tape.softmax(h).unwrap();
        let out = tape.sum_rows(s).unwrap();
        let input = t(seed + 7, m, n);
        let first = tape.forward(&[input.clone()], out).unwrap();
        let second = tape.forward(&[input.clone()], out).unwrap();
        tape.forward(&[t(seed + 8, m, n)], out).unwrap();
        let third = tape.forward(&[input], out).unwrap();
        let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&first), bits(&second));
        prop_assert_eq!(bits(&first), bits(&third));
    }
}

#[test]
fn square_gradient_is_six() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::scalar(3.0));
    let f = tape.mul(w, w).unwrap();
    assert_eq!(tape.backward(f, &[w]).unwrap()[0].item(), 6.0);
}

#[test]
fn constant_function_has_zero_gradient() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::scalar(3.0));
    let c = tape.constant(Tensor::scalar(5.0));
    let f = tape.sum(c).unwrap();
    assert_eq!(tape.backward(f, &[w]).unwrap()[0].item(), 0.0);
}

#[test]
fn three_layer_tape_matches_straight_line_arithmetic() {
    let mut r = rng(42);
    let dims = [5, 4, 3, 2];
    let acts = [Activation::Tanh, Activation::Relu, Activation::Identity];
    let layers: Vec<LayerParams> = dims
        .windows(2)
        .zip(acts)
        .map(|(w, a)| LayerParams { weight: rand_tensor(&mut r, w[1], w[0], 1.0), bias: rand_tensor(&mut r, 1, w[1], 0.5), activation: a })
        .collect();
    let x = rand_tensor(&mut r, 6, 5, 2.0);
    let expected = naive_mlp(&layers, &x);
    let got = Mlp::new(layers).unwrap().forward(&x).unwrap();
    for (i, row) in expected.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            assert_eq!(got.get(i, j).to_bits(), v.to_bits(), "entry ({i}, {j})");
        }
    }
}

#[test]
fn norm_of_gradient_hand_example() {
    // L = (e w)^2, ||dL/dw|| = 2 e^2 w, d/de = 4 e w.
    let mut tape = Tape::new();
    let e = tape.param(Tensor::scalar(1.0));
    let w = tape.param(Tensor::scalar(1.0));
    let p = tape.mul(e, w).unwrap();
    let l = tape.mul(p, p).unwrap();
    let r = grad_of_grad_norm_exact(&mut tape, l, &[w], &[e]).unwrap();
    assert!((r.norm - 2.0).abs() < 1e-12);
    assert!((r.grads[0].item() - 4.0).abs() < 1e-12);
    let fd = fd_grad(
        |ts| {
            let (e, w) = (ts[0].item(), 1.0);
            (2.0 * e * e * w).abs()
        },
        &[Tensor::scalar(1.0)],
        H,
    );
    assert!((fd[0].item() - 4.0).abs() < 1e-6);
}

#[test]
fn outer_variable_outside_the_loss_gets_zero() {
    let mut tape = Tape::new();
    let unrelated = tape.param(Tensor::row(vec![1.0, 2.0]));
    let w = tape.param(Tensor::scalar(2.0));
    let l = tape.mul(w, w).unwrap();
    let r = grad_of_grad_norm_exact(&mut tape, l, &[w], &[unrelated]).unwrap();
    assert_eq!(r.grads[0].values(), &[0.0, 0.0]);
}

#[test]
fn zero_inner_gradient_is_reported() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::scalar(0.0));
    let l = tape.mul(w, w).unwrap();
    assert!(matches!(grad_of_grad_norm_exact(&mut tape, l, &[w], &[w]), Err(Error::ZeroGradientNorm)));
}

/// `||d L / d layer2||` of a 2-2-2 tanh net, as a plain function of all
/// parameters, evaluated with the tape's first-order backward.
fn layer2_grad_norm(params: &[Tensor], x: &Tensor, labels: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let v: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let l = two_two_two(&mut tape, &v, x, labels);
    let g = tape.backward(l, &v[2..]).unwrap();
    smoothed_norm(&g)
}

fn two_two_two(tape: &mut Tape, v: &[Var], x: &Tensor, labels: &[usize]) -> Var {
    let xv = tape.constant(x.clone());
    let w1t = tape.transpose(v[0]).unwrap();
    let a = tape.matmul(xv, w1t).unwrap();
    let a = tape.add_row(a, v[1]).unwrap();
    let h = tape.tanh(a).unwrap();
    let w2t = tape.transpose(v[2]).unwrap();
    let o = tape.matmul(h, w2t).unwrap();
    let o = tape.add_row(o, v[3]).unwrap();
    tape.softmax_cross_entropy(o, labels).unwrap()
}

#[test]
fn exact_norm_gradient_matches_fd_on_random_2_2_2_nets() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let params = vec![rand_tensor(&mut r, 2, 2, 1.0), rand_tensor(&mut r, 1, 2, 0.5), rand_tensor(&mut r, 2, 2, 1.0), rand_tensor(&mut r, 1, 2, 0.5)];
        let x = rand_tensor(&mut r, 4, 2, 1.5);
        let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..2)).collect();
        let mut tape = Tape::new();
        let v: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let l = two_two_two(&mut tape, &v, &x, &labels);
        let exact = grad_of_grad_norm_exact(&mut tape, l, &v[2..], &v[..2]).unwrap();
        let fd = fd_grad(
            |ts| {
                let mut all = ts.to_vec();
                all.extend_from_slice(&params[2..]);
                layer2_grad_norm(&all, &x, &labels)
            },
            &params[..2],
            H,
        );
        let err = max_rel_err(&flat(&exact.grads), &flat(&fd), FLOOR);
        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
    }
}
