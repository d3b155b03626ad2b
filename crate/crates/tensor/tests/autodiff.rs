use proptest::prelude::*;
use relchain_tensor::gradcheck::{check_inputs, rel_err, STEP};
use relchain_tensor::{sigmoid, Tape, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn square_at_three_matches_central_difference() {
    let mut tape = Tape::new();
    let x = tape.var(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    let analytic = tape.grad(x).unwrap().data()[0];
    let f = |x: f64| x * x;
    let numeric = (f(3.0 + STEP) - f(3.0 - STEP)) / (2.0 * STEP);
    assert_eq!(analytic, 6.0);
    assert!((analytic - numeric).abs() / numeric.abs() <= 1e-6);
}

#[test]
fn cross_entropy_of_uniform_logits_against_finite_difference() {
    // numeric oracle: loss(z) = logsumexp(z) - z[0]
    let loss = |z: [f64; 2]| (z[0].exp() + z[1].exp()).ln() - z[0];
    let numeric: Vec<f64> = (0..2)
        .map(|i| {
            let (mut up, mut down) = ([0.0; 2], [0.0; 2]);
            up[i] += STEP;
            down[i] -= STEP;
            (loss(up) - loss(down)) / (2.0 * STEP)
        })
        .collect();
    assert!((numeric[0] + 0.5).abs() < 1e-9 && (numeric[1] - 0.5).abs() < 1e-9);

    let mut tape = Tape::new();
    let z = tape.var(t(&[1, 2], &[0.0, 0.0]));
    let l = tape.cross_entropy(z, &[0]).unwrap();
    tape.backward(l).unwrap();
    let g = tape.grad(z).unwrap().data().to_vec();
    for (a, n) in g.iter().zip(&numeric) {
        assert!(rel_err(*a, *n) < 1e-6);
    }
    assert_eq!(g, vec![-0.5, 0.5]);
}

#[test]
fn composed_tanh_linear_matches_chain_rule() {
    // f(x) = Σ tanh(W x), df/dx = Wᵀ (1 - tanh²(W x))
    let w = [0.3, -1.2, 0.5, 2.0, 0.1, -0.7];
    let x = [0.4, -0.9];
    let mut tape = Tape::new();
    let wv = tape.constant(t(&[3, 2], &w));
    let xv = tape.var(t(&[2, 1], &x));
    let h = tape.matmul(wv, xv).unwrap();
    let a = tape.tanh(h);
    let f = tape.sum_all(a);
    tape.backward(f).unwrap();
    let g = tape.grad(xv).unwrap().data().to_vec();
    let mut expected = [0.0; 2];
    for r in 0..3 {
        let z = w[r * 2] * x[0] + w[r * 2 + 1] * x[1];
        let d = 1.0 - z.tanh().powi(2);
        expected[0] += w[r * 2] * d;
        expected[1] += w[r * 2 + 1] * d;
    }
    for (a, e) in g.iter().zip(expected) {
        assert!((a - e).abs() < 1e-14);
    }
}

#[test]
fn composed_sigmoid_gate_matches_chain_rule() {
    // f(x) = Σ σ(x)·x, df/dx = σ + x σ (1 - σ)
    let xs = [-1.5, 0.2, 3.0];
    let mut tape = Tape::new();
    let x = tape.var(t(&[3], &xs));
    let s = tape.sigmoid(x);
    let p = tape.mul(s, x).unwrap();
    let f = tape.sum_all(p);
    tape.backward(f).unwrap();
    for (g, &x) in tape.grad(x).unwrap().data().iter().zip(&xs) {
        let s = sigmoid(x);
        assert!((g - (s + x * s * (1.0 - s))).abs() < 1e-14);
    }
}

#[test]
fn composed_softmax_dot_matches_chain_rule() {
    // f(a) = Σ softmax(a) ⊙ b, df/da = y ⊙ (b - y·b)
    let a = [0.5, -1.0, 2.0, 0.0];
    let b = [1.0, 3.0, -2.0, 0.5];
    let mut tape = Tape::new();
    let av = tape.var(t(&[1, 4], &a));
    let bv = tape.constant(t(&[1, 4], &b));
    let y = tape.softmax(av).unwrap();
    let p = tape.mul(y, bv).unwrap();
    let f = tape.sum_all(p);
    tape.backward(f).unwrap();
    let y = tape.value(y).data().to_vec();
    let dot: f64 = y.iter().zip(&b).map(|(p, q)| p * q).sum();
    for (i, g) in tape.grad(av).unwrap().data().iter().enumerate() {
        assert!((g - y[i] * (b[i] - dot)).abs() < 1e-14);
    }
}

#[test]
fn gradient_accumulates_over_shared_parents() {
    // y = x·x + 3x reuses x three times
    let r = check_inputs(&[Tensor::scalar(-0.7)], |t, v| {
        let sq = t.mul(v[0], v[0])?;
        let lin = t.affine(v[0], 3.0, 0.0);
        t.add(sq, lin)
    })
    .unwrap();
    assert!(r.passes());
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-30.0f64..30.0, rows * cols)
        .prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(x in (1usize..6, 1usize..8).prop_flat_map(|(r, c)| matrix(r, c))) {
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let y = tape.softmax(v).unwrap();
        let (rows, _) = tape.value(y).rows_cols();
        for r in 0..rows {
            let s: f64 = tape.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn cross_entropy_is_non_negative(
        x in (1usize..6, 2usize..8).prop_flat_map(|(r, c)| matrix(r, c)),
        seed in 0usize..1000,
    ) {
        let (rows, cols) = x.rows_cols();
        let labels: Vec<usize> = (0..rows).map(|i| (seed + 7 * i) % cols).collect();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let l = tape.cross_entropy(v, &labels).unwrap();
        prop_assert!(tape.value(l).data()[0] >= 0.0);
    }

    #[test]
    fn elementwise_ops_pass_gradcheck(
        a in (1usize..4, 1usize..4).prop_flat_map(|(r, c)| (matrix(r, c), matrix(r, c)))
    ) {
        let (x, y) = a;
        let scale = |m: Tensor| m.map(|v| v / 15.0);
        let r = check_inputs(&[scale(x), scale(y)], |t, v| {
            let p = t.mul(v[0], v[1])?;
            let s = t.tanh(p);
            let q = t.sub(s, v[1])?;
            let e = t.sigmoid(q);
            Ok(t.sum_all(e))
        }).unwrap();
        prop_assert!(r.passes(), "{:?}", r);
    }
}

#[test]
fn cross_entropy_is_zero_only_for_confident_correct_prediction() {
    let mut tape = Tape::new();
    let z = tape.constant(t(&[1, 3], &[800.0, 0.0, 0.0]));
    let l = tape.cross_entropy(z, &[0]).unwrap();
    assert_eq!(tape.value(l).data()[0], 0.0);
    let l = tape.cross_entropy(z, &[1]).unwrap();
    assert!(tape.value(l).data()[0] > 0.0);
}
