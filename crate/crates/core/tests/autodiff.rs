use ggp::autodiff::{finite_difference_check, Tape, Tensor, Var};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

/// A small attention-like block touching most differentiable ops.
fn block(tape: &Tape<f64>, x: Var, w: &Tensor<f64>, targets: &[usize]) -> ggp::Result<Var> {
    let w = tape.constant(w.clone());
    let h = tape.matmul(x, w)?;
    let gamma = tape.constant(Tensor::new(vec![5], vec![1.0, 0.5, 2.0, 1.5, 0.8])?);
    let beta = tape.constant(Tensor::new(vec![5], vec![0.1, -0.2, 0.0, 0.3, 0.05])?);
    let h = tape.gelu(tape.layer_norm(h, gamma, beta, 1e-6)?)?;
    let scores = tape.softmax(tape.matmul(h, tape.transpose(h)?)?)?;
    let mixed = tape.matmul(scores, h)?;
    let unit = tape.normalize_rows(mixed)?;
    let both = tape.concat(&[unit, h], 1)?;
    tape.softmax_cross_entropy(both, targets)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn composed_block_matches_finite_differences(x in matrix(3, 4), w in matrix(4, 5), t in prop::collection::vec(0usize..10, 3)) {
        let worst = finite_difference_check(|tape, v| block(tape, v, &w, &t), &x, 1e-4).unwrap();
        prop_assert!(worst < 1e-6, "relative error {worst:e}");
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp(logits in matrix(4, 6), t in prop::collection::vec(0usize..6, 4)) {
        let tape = Tape::new();
        let v = tape.constant(logits.clone());
        let got = tape.item(tape.softmax_cross_entropy(v, &t).unwrap());
        let want: f64 = logits.data().chunks(6).zip(&t).map(|(row, &k)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() - row[k]
        }).sum::<f64>() / 4.0;
        prop_assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn gradients_are_linear_in_the_output(x in matrix(2, 3), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let grad = |f: &dyn Fn(&Tape<f64>, Var) -> ggp::Result<Var>| {
            let tape = Tape::new();
            let v = tape.param(x.clone());
            let out = f(&tape, v).unwrap();
            tape.backward(out).unwrap().wrt(v).data().to_vec()
        };
        let f = |t: &Tape<f64>, v: Var| t.sum(t.gelu(v)?);
        let g = |t: &Tape<f64>, v: Var| t.mean(t.mul(v, v)?);
        let combined = grad(&|t, v| t.add(t.scale(f(t, v)?, a)?, t.scale(g(t, v)?, b)?));
        let (gf, gg) = (grad(&f), grad(&g));
        for i in 0..combined.len() {
            prop_assert!((combined[i] - (a * gf[i] + b * gg[i])).abs() < 1e-12);
        }
    }
}

#[test]
fn reused_nodes_accumulate_gradients() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(&[1.5, -2.0]));
    let y = tape.mul(x, x).unwrap();
    let z = tape.sum(tape.add(y, x).unwrap()).unwrap();
    let g = tape.backward(z).unwrap().wrt(x);
    assert_eq!(g.data(), &[4.0, -3.0]);
}
