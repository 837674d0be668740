use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn no_feeds() -> BTreeMap<String, Tensor> {
    BTreeMap::new()
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

#[test]
fn identity_graph() {
    let mut g = Graph::new();
    g.placeholder("x").unwrap();
    let feeds = BTreeMap::from([("x".to_owned(), Tensor::vector(vec![1.0, 2.0]))]);
    assert_eq!(g.evaluate(&feeds).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn relu_forward() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
    let y = g.relu(x).unwrap();
    assert_eq!(g.val(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn matmul_shape_rule() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 4]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.val(c).shape(), &[2, 4]);
}

#[test]
fn shape_mismatch_names_node() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    match err {
        Error::Shape { node, op, .. } => {
            assert_eq!(node, 2);
            assert_eq!(op, "matmul");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn shape_mismatch_during_evaluate() {
    let mut g = Graph::new();
    let x = g.placeholder("x").unwrap();
    let w = g.constant(Tensor::zeros(&[3, 1]));
    g.matmul(x, w).unwrap();
    let feeds = BTreeMap::from([("x".to_owned(), Tensor::zeros(&[2, 2]))]);
    assert!(matches!(
        g.evaluate(&feeds),
        Err(Error::Shape { node: 2, .. })
    ));
}

#[test]
fn unbound_placeholder() {
    let mut g = Graph::new();
    g.placeholder("x").unwrap();
    assert!(matches!(g.evaluate(&no_feeds()), Err(Error::Unbound(name)) if name == "x"));
}

#[test]
fn debug_mode_rejects_non_finite() {
    let mut g = Graph::debug();
    let x = g.input("x", Tensor::vector(vec![1.0])).unwrap();
    let err = g.scale(x, f64::INFINITY).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "scale", .. }));

    let mut lenient = Graph::new();
    let x = lenient.input("x", Tensor::vector(vec![1.0])).unwrap();
    assert!(lenient.scale(x, f64::INFINITY).is_ok());
}

#[test]
fn backward_before_forward() {
    let mut g = Graph::new();
    let x = g.placeholder("x").unwrap();
    let y = g.relu(x).unwrap();
    assert!(matches!(
        g.backward(y, &Tensor::vector(vec![1.0])),
        Err(Error::BackwardBeforeForward(0))
    ));
}

#[test]
fn seed_shape_checked() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
    assert!(matches!(
        g.backward(x, &Tensor::vector(vec![1.0])),
        Err(Error::SeedShape { .. })
    ));
}

#[test]
fn duplicate_names_rejected() {
    let mut g = Graph::new();
    g.param("w", Tensor::scalar(1.0)).unwrap();
    assert!(matches!(
        g.param("w", Tensor::scalar(1.0)),
        Err(Error::DuplicateName(_))
    ));
}

#[test]
fn sigmoid_derivative_at_zero() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::scalar(0.0)).unwrap();
    let y = g.sigmoid(x).unwrap();
    let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(grads.get("x").unwrap().item(), 0.25);
}

#[test]
fn relu_derivative() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::vector(vec![1.0, 0.0, -1.0])).unwrap();
    let y = g.relu(x).unwrap();
    let grads = g.backward(y, &Tensor::vector(vec![1.0, 1.0, 1.0])).unwrap();
    assert_eq!(grads.get("x").unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn inputs_without_requires_grad_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::vector(vec![1.0])).unwrap();
    let y = g
        .input("y", Tensor::vector(vec![2.0]).with_requires_grad(true))
        .unwrap();
    let z = g.mul(x, y).unwrap();
    let grads = g.backward(z, &Tensor::vector(vec![1.0])).unwrap();
    assert!(grads.get("x").is_none());
    assert_eq!(grads.get("y").unwrap().data(), &[1.0]);
}

#[test]
fn fan_out_accumulates() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::scalar(3.0)).unwrap();
    let y = g.mul(x, x).unwrap();
    let z = g.add(y, x).unwrap();
    let grads = g.backward(z, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(grads.get("x").unwrap().item(), 7.0);
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let a = g.param("a", random_matrix(&mut rng, 3, 3)).unwrap();
    let b = g.param("b", random_matrix(&mut rng, 3, 3)).unwrap();
    let c = g.matmul(a, b).unwrap();
    let w = g.constant(random_matrix(&mut rng, 3, 3));
    let weighted = g.mul(c, w).unwrap();
    let loss = g.reduce_mean(weighted).unwrap();
    let report = grad_check(
        &mut g,
        loss,
        &["a", "b"],
        1e-6,
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn grl_forward_is_identity() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::vector(vec![1.0, -2.0])).unwrap();
    let y = g.grl(x, 1.0).unwrap();
    assert_eq!(g.val(y).data(), &[1.0, -2.0]);
}

#[test]
fn grl_backward_reverses_and_scales() {
    for (upstream, coeff, expected) in [
        (vec![0.5, 0.5], 1.0, vec![-0.5, -0.5]),
        (vec![1.0], 2.0, vec![-2.0]),
    ] {
        let mut g = Graph::new();
        let x = g
            .param("x", Tensor::vector(vec![0.0; upstream.len()]))
            .unwrap();
        let y = g.grl(x, coeff).unwrap();
        let grads = g.backward(y, &Tensor::vector(upstream)).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), expected.as_slice());
    }
}

fn mlp_loss(with_grl: Option<f64>, seed: u64) -> Gradients {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let x = g.constant(random_matrix(&mut rng, 5, 4));
    let w1 = g.param("w1", random_matrix(&mut rng, 4, 6)).unwrap();
    let w2 = g.param("w2", random_matrix(&mut rng, 6, 1)).unwrap();
    let h = g.matmul(x, w1).unwrap();
    let h = g.relu(h).unwrap();
    let h = match with_grl {
        Some(c) => g.grl(h, c).unwrap(),
        None => h,
    };
    let o = g.matmul(h, w2).unwrap();
    let o = g.sigmoid(o).unwrap();
    let o = g.log(o).unwrap();
    let loss = g.reduce_mean(o).unwrap();
    g.backward(loss, &Tensor::scalar(1.0)).unwrap()
}

#[test]
fn grl_gradient_is_negated_plain_gradient() {
    let plain = mlp_loss(None, 5);
    let reversed = mlp_loss(Some(1.0), 5);
    let (p, r) = (plain.get("w1").unwrap(), reversed.get("w1").unwrap());
    for (a, b) in p.data().iter().zip(r.data()) {
        assert_eq!(*b, -a);
    }
    // parameters downstream of the reversal are unaffected
    assert_eq!(plain.get("w2"), reversed.get("w2"));
}

#[test]
fn single_sigmoid_passes_grad_check() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
    let y = g.sigmoid(x).unwrap();
    let loss = g.reduce_mean(y).unwrap();
    let report = grad_check(&mut g, loss, &["x"], 1e-6, &GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn grad_check_flags_a_reversed_gradient() {
    let mut g = Graph::new();
    let x = g.param("x", Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
    let y = g.sigmoid(x).unwrap();
    let r = g.grl(y, 1.0).unwrap();
    let loss = g.reduce_mean(r).unwrap();
    let report = grad_check(&mut g, loss, &["x"], 1e-4, &GradCheckOptions::default()).unwrap();
    assert!(!report.passed());
    assert!((report.worst() - 2.0).abs() < 1e-6, "{report:?}");
}

#[test]
fn evaluation_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let a = g.param("a", random_matrix(&mut rng, 4, 5)).unwrap();
    let b = g.param("b", random_matrix(&mut rng, 5, 3)).unwrap();
    let c = g.matmul(a, b).unwrap();
    g.softmax(c).unwrap();
    let first = g.evaluate(&no_feeds()).unwrap();
    let second = g.evaluate(&no_feeds()).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&first), bits(&second));
}

#[test]
fn gradient_of_sum_is_sum_of_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x0 = random_matrix(&mut rng, 3, 4);
    let build = |which: u8| {
        let mut g = Graph::new();
        let x = g.param("x", x0.clone()).unwrap();
        let s = g.sigmoid(x).unwrap();
        let l1 = g.reduce_mean(s).unwrap();
        let sq = g.mul(x, x).unwrap();
        let l2 = g.reduce_mean(sq).unwrap();
        let out = match which {
            0 => l1,
            1 => l2,
            _ => g.add(l1, l2).unwrap(),
        };
        g.backward(out, &Tensor::scalar(1.0))
            .unwrap()
            .get("x")
            .unwrap()
            .clone()
    };
    let (a, b, sum) = (build(0), build(1), build(2));
    for ((a, b), s) in a.data().iter().zip(b.data()).zip(sum.data()) {
        assert!((a + b - s).abs() <= 1e-15 * s.abs().max(1.0));
    }
}

#[test]
fn select_rows_scatters_back() {
    let mut g = Graph::new();
    let x = g
        .param(
            "x",
            Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
        )
        .unwrap();
    let s = g.select_rows(x, &[2, 0, 2]).unwrap();
    assert_eq!(g.val(s).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    let grads = g.backward(s, &Tensor::full(&[3, 2], 1.0)).unwrap();
    assert_eq!(
        grads.get("x").unwrap().data(),
        &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
    );
}

#[test]
fn log_is_floored() {
    let mut g = Graph::new();
    let x = g.input("x", Tensor::vector(vec![0.0])).unwrap();
    let y = g.log(x).unwrap();
    assert_eq!(g.val(y).item(), LOG_FLOOR.ln());
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let mut g = Graph::new();
    let x = g
        .input("x", Tensor::matrix(1, 3, vec![1000.0, 1000.0, -1000.0]))
        .unwrap();
    let y = g.softmax(x).unwrap();
    let v = g.val(y).data();
    assert_eq!(v[0], 0.5);
    assert_eq!(v[2], 0.0);
}

#[derive(Clone, Copy, Debug)]
enum Prim {
    MatMul,
    Add,
    AddRow,
    Mul,
    MulCol,
    Scale,
    Concat,
    Relu,
    Sigmoid,
    Log,
    Softmax,
    SmoothL1,
}

/// Builds `mean(w ⊙ op(x, y))` with `x`, `y` parameters and checks it.
fn check_primitive(prim: Prim, seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let away_from = |rng: &mut ChaCha8Rng, kinks: &[f64], lo: f64, hi: f64| loop {
        let v: f64 = rng.gen_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > 0.05) {
            break v;
        }
    };
    let x_data: Vec<f64> = (0..12)
        .map(|_| match prim {
            Prim::Relu => away_from(&mut rng, &[0.0], -2.0, 2.0),
            Prim::SmoothL1 => away_from(&mut rng, &[-1.0, 1.0], -3.0, 3.0),
            Prim::Log => rng.gen_range(0.2..3.0),
            _ => rng.gen_range(-2.0..2.0),
        })
        .collect();
    let mut g = Graph::new();
    let x = g.param("x", Tensor::matrix(3, 4, x_data)).unwrap();
    let mut names = vec!["x"];
    let out = match prim {
        Prim::MatMul => {
            let y = g.param("y", random_matrix(&mut rng, 4, 2)).unwrap();
            names.push("y");
            g.matmul(x, y).unwrap()
        }
        Prim::Add | Prim::Mul => {
            let y = g.param("y", random_matrix(&mut rng, 3, 4)).unwrap();
            names.push("y");
            if matches!(prim, Prim::Add) {
                g.add(x, y)
            } else {
                g.mul(x, y)
            }
            .unwrap()
        }
        Prim::AddRow => {
            let y = g.param("y", random_matrix(&mut rng, 1, 4)).unwrap();
            names.push("y");
            g.add(x, y).unwrap()
        }
        Prim::MulCol => {
            let y = g.param("y", random_matrix(&mut rng, 3, 1)).unwrap();
            names.push("y");
            g.mul(x, y).unwrap()
        }
        Prim::Scale => g.scale(x, -1.7).unwrap(),
        Prim::Concat => {
            let y = g.param("y", random_matrix(&mut rng, 3, 2)).unwrap();
            names.push("y");
            g.concat(&[x, y]).unwrap()
        }
        Prim::Relu => g.relu(x).unwrap(),
        Prim::Sigmoid => g.sigmoid(x).unwrap(),
        Prim::Log => g.log(x).unwrap(),
        Prim::Softmax => g.softmax(x).unwrap(),
        Prim::SmoothL1 => g.smooth_l1(x).unwrap(),
    };
    let shape = g.val(out).shape().to_vec();
    let rows = shape[0];
    let cols = shape[1];
    let w = g.constant(random_matrix(&mut rng, rows, cols));
    let weighted = g.mul(out, w).unwrap();
    let loss = g.reduce_mean(weighted).unwrap();
    grad_check(&mut g, loss, &names, 1e-5, &GradCheckOptions::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn primitives_match_finite_differences(seed in any::<u64>(), which in 0usize..12) {
        let prim = [
            Prim::MatMul, Prim::Add, Prim::AddRow, Prim::Mul, Prim::MulCol, Prim::Scale,
            Prim::Concat, Prim::Relu, Prim::Sigmoid, Prim::Log, Prim::Softmax, Prim::SmoothL1,
        ][which];
        let report = check_primitive(prim, seed);
        prop_assert!(report.passed(), "{:?}: {:?}", prim, report);
    }

    #[test]
    fn grl_forward_bit_identical(values in proptest::collection::vec(-1e6f64..1e6, 1..16), coeff in 0.0f64..4.0) {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(values.clone())).unwrap();
        let y = g.grl(x, coeff).unwrap();
        let same = g.val(y).data().iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
    }
}
