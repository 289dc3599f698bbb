use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
}

#[test]
fn matmul_identity() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let i = tape.constant(Tensor::eye(2));
    let y = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(&[0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn l2_norm_of_three_four() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(&[3.0, 4.0]));
    let y = tape.l2_norm(x).unwrap();
    assert_eq!(tape.item(y), 5.0);
}

#[test]
fn shape_mismatch_names_the_op() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert!(matches!(err, Error::ShapeMismatch { op: "matmul", .. }));
    assert!(err.to_string().contains("[2, 3]"));
    let c = tape.constant(Tensor::zeros(vec![4]));
    assert!(matches!(tape.add(a, c), Err(Error::ShapeMismatch { op: "add", .. })));
}

#[test]
fn cross_entropy_uniform_is_ln2() {
    let tape = Tape::new();
    let z = tape.constant(t(&[1, 2], &[0.3, 0.3]));
    let l = tape.softmax_cross_entropy(z, &[1]).unwrap();
    assert!((tape.item(l) - 2f64.ln()).abs() < 1e-15);
}

#[test]
fn cross_entropy_certain_prediction_is_zero() {
    let tape = Tape::new();
    let z = tape.constant(t(&[1, 2], &[1e9, -1e9]));
    let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
    assert!(tape.item(l).abs() < 1e-9);
}

#[test]
fn cross_entropy_matches_direct_formula() {
    // direct scalar evaluation of −log(e^{z_t} / Σ e^{z_j})
    let rows = [[1.0f64, 2.0], [3.0, 0.0]];
    let targets = [1usize, 0];
    let direct: f64 = rows
        .iter()
        .zip(targets)
        .map(|(r, t)| -(r[t].exp() / (r[0].exp() + r[1].exp())).ln())
        .sum::<f64>()
        / 2.0;
    let tape = Tape::new();
    let z = tape.constant(Tensor::matrix(&[&rows[0], &rows[1]]));
    let l = tape.softmax_cross_entropy(z, &targets).unwrap();
    assert!((tape.item(l) - direct).abs() < 1e-15);
    assert!((direct - 0.180_924_519_545_982_4).abs() < 1e-15);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let tape = Tape::new();
    let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
    assert!(matches!(
        tape.softmax_cross_entropy(z, &[2]),
        Err(Error::IndexOutOfRange { .. })
    ));
}

#[test]
fn backward_of_square() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(&[3.0]));
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(x).data(), &[6.0]);
}

#[test]
fn backward_of_matvec_gives_column_sums() {
    let a = Tensor::matrix(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
    let f = |tape: &Tape<f64>, x: Var| {
        let at = tape.constant(a.clone());
        let y = tape.matmul(at, x)?;
        tape.sum(y)
    };
    let x = t(&[3, 1], &[0.5, -1.0, 2.0]);
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let l = f(&tape, xv).unwrap();
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(xv).data(), &[5.0, 7.0, 9.0]);
    assert!(finite_difference_check(f, &x, 1e-5).unwrap() < 1e-8);
}

#[test]
fn unused_tensor_gets_zero_gradient() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(&[1.0, 2.0]));
    let unused = tape.param(Tensor::vector(&[5.0]));
    let l = tape.sum(x).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.get(unused).is_none());
    assert_eq!(g.wrt(unused).data(), &[0.0]);
}

#[test]
fn gradients_accumulate_over_reuse() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(&[2.0]));
    let a = tape.scale(x, 3.0).unwrap();
    let b = tape.add(a, x).unwrap();
    let l = tape.sum(b).unwrap();
    assert_eq!(tape.backward(l).unwrap().wrt(x).data(), &[4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(&[1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
}

#[test]
fn backward_rejects_foreign_variable() {
    let other = Tape::<f64>::new();
    let y = other.param(Tensor::scalar(1.0));
    let tape = Tape::<f64>::new();
    assert!(tape.backward(y).is_err());
}

#[test]
fn fd_check_of_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[3, 4]);
    let err = finite_difference_check(
        |tape, x| {
            let sq = tape.mul(x, x)?;
            tape.sum(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn fd_check_of_constant_is_exact() {
    let x = Tensor::vector(&[1.0, 2.0]);
    let err = finite_difference_check(|tape, _x| Ok(tape.constant(Tensor::scalar(4.0))), &x, 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn fd_check_rejects_bad_step() {
    let x = Tensor::vector(&[1.0]);
    assert!(finite_difference_check(|tape, x| tape.sum(x), &x, 0.5).is_err());
    assert!(finite_difference_check(|tape, x| tape.sum(x), &x, 0.0).is_err());
}

#[test]
fn fd_check_rejects_non_finite_evaluation() {
    let x = Tensor::vector(&[1.0]);
    let r = finite_difference_check(
        |tape, x| {
            let big = tape.scale(x, f64::MAX)?;
            let y = tape.scale(big, 10.0)?;
            tape.sum(y)
        },
        &x,
        1e-5,
    );
    assert!(r.is_err());
}

/// Builds a scalar loss from one primitive applied to `x`, contracting the
/// output with a fixed random weight so every output element matters.
fn primitive_case(
    kind: usize,
    rng: &mut ChaCha8Rng,
) -> (Tensor<f64>, Box<dyn Fn(&Tape<f64>, Var) -> crate::error::Result<Var>>) {
    let rows = rng.gen_range(1..4);
    let cols = rng.gen_range(2..5);
    let x = random(rng, &[rows, cols]);
    let other = random(rng, &[rows, cols]);
    let right = random(rng, &[cols, 3]);
    let bias = random(rng, &[cols]);
    let gamma = random(rng, &[cols]);
    let contract = move |tape: &Tape<f64>, y: Var, w: Tensor<f64>| {
        let wv = tape.constant(w);
        let p = tape.mul(y, wv)?;
        tape.sum(p)
    };
    let w_same = random(rng, &[rows, cols]);
    let w_mm = random(rng, &[rows, 3]);
    let w_t = random(rng, &[cols, rows]);
    let w_cat = random(rng, &[rows * 2, cols]);
    let w_sl = random(rng, &[rows, 1]);
    let w_emb = random(rng, &[3, cols]);
    let ids = [rows - 1, 0, rows - 1];
    let f: Box<dyn Fn(&Tape<f64>, Var) -> crate::error::Result<Var>> = match kind {
        0 => Box::new(move |tp, x| {
            let r = tp.constant(right.clone());
            let y = tp.matmul(x, r)?;
            contract(tp, y, w_mm.clone())
        }),
        1 => Box::new(move |tp, x| {
            let b = tp.constant(bias.clone());
            let y = tp.add(x, b)?;
            contract(tp, y, w_same.clone())
        }),
        2 => Box::new(move |tp, x| {
            let o = tp.constant(other.clone());
            let y = tp.mul(x, o)?;
            let y = tp.mul(y, x)?;
            contract(tp, y, w_same.clone())
        }),
        3 => Box::new(move |tp, x| {
            let o = tp.constant(other.clone());
            let y = tp.sub(o, x)?;
            contract(tp, y, w_same.clone())
        }),
        4 => Box::new(move |tp, x| {
            let y = tp.scale(x, -2.5)?;
            contract(tp, y, w_same.clone())
        }),
        5 => Box::new(move |tp, x| {
            let y = tp.gelu(x)?;
            contract(tp, y, w_same.clone())
        }),
        6 => Box::new(move |tp, x| {
            // keep inputs away from the kink
            let o = tp.constant(other.clone());
            let y = tp.add(x, o)?;
            let y = tp.scale(y, 3.0)?;
            let y = tp.relu(y)?;
            contract(tp, y, w_same.clone())
        }),
        7 => Box::new(move |tp, x| {
            let y = tp.softmax(x)?;
            contract(tp, y, w_same.clone())
        }),
        8 => Box::new(move |tp, x| {
            let g = tp.param(gamma.clone());
            let b = tp.constant(bias.clone());
            let y = tp.layer_norm(x, g, b, 1e-6)?;
            contract(tp, y, w_same.clone())
        }),
        9 => Box::new(move |tp, x| {
            let y = tp.embedding(x, &ids)?;
            contract(tp, y, w_emb.clone())
        }),
        10 => Box::new(move |tp, x| {
            let y = tp.concat(&[x, x], 0)?;
            let y = tp.mul(y, y)?;
            contract(tp, y, w_cat.clone())
        }),
        11 => Box::new(move |tp, x| {
            let y = tp.slice(x, 1, 1, 2)?;
            contract(tp, y, w_sl.clone())
        }),
        12 => Box::new(move |tp, x| {
            let y = tp.transpose(x)?;
            contract(tp, y, w_t.clone())
        }),
        13 => Box::new(move |tp, x| {
            let y = tp.mul(x, x)?;
            tp.mean(y)
        }),
        14 => Box::new(|tp, x| tp.l2_norm(x)),
        15 => Box::new(move |tp, x| {
            let y = tp.normalize_rows(x)?;
            contract(tp, y, w_same.clone())
        }),
        16 => {
            let targets: Vec<usize> = (0..rows).map(|r| r % cols).collect();
            Box::new(move |tp, x| tp.softmax_cross_entropy(x, &targets))
        }
        17 => Box::new(move |tp, x| {
            let r = tp.reshape(x, &[1, rows * cols])?;
            let y = tp.mul(r, r)?;
            tp.sum(y)
        }),
        _ => Box::new(move |tp, x| {
            // batched matmul: [1, rows, cols] × [1, cols, rows]
            let a = tp.reshape(x, &[1, rows, cols])?;
            let b = tp.permute(a, &[0, 2, 1])?;
            let y = tp.matmul(a, b)?;
            let y = tp.reshape(y, &[rows, rows])?;
            let y = tp.softmax(y)?;
            contract(tp, y, Tensor::full(vec![rows, rows], 0.7))
        }),
    };
    (x, f)
}

#[test]
fn every_primitive_matches_finite_differences() {
    const KINDS: usize = 19;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..(KINDS * 12) {
        let kind = trial % KINDS;
        let (x, f) = primitive_case(kind, &mut rng);
        let err = finite_difference_check(f, &x, 1e-5).unwrap();
        assert!(err < 1e-4, "primitive {kind}, trial {trial}: relative error {err}");
    }
}

#[test]
fn softmax_rows_sum_to_one_and_layer_norm_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let x = random(&mut rng, &[5, 7]);
        let scaled: Vec<f64> = x.data().iter().map(|v| v * 50.0).collect();
        let tape = Tape::new();
        let xv = tape.constant(t(&[5, 7], &scaled));
        let s = tape.value(tape.softmax(xv).unwrap());
        for row in s.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let g = tape.constant(Tensor::full(vec![7], 1.0));
        let b = tape.constant(Tensor::zeros(vec![7]));
        let ln = tape.value(tape.layer_norm(xv, g, b, 1e-6).unwrap());
        for row in ln.data().chunks(7) {
            let mean = row.iter().sum::<f64>() / 7.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-8, "{var}");
        }
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (x, f) = primitive_case(18, &mut rng);
        let tape = Tape::new();
        let v = tape.param(x);
        let l = f(&tape, v).unwrap();
        let val = tape.item(l);
        (val.to_bits(), tape.backward(l).unwrap().wrt(v).into_data())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a, b);
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn works_in_single_precision() {
    let tape = Tape::<f32>::new();
    let x = tape.param(Tensor::vector(&[3.0f32, 4.0]));
    let n = tape.l2_norm(x).unwrap();
    assert_eq!(tape.item(n), 5.0f32);
    let g = tape.backward(n).unwrap();
    assert_eq!(g.wrt(x).data(), &[0.6f32, 0.8]);
}
