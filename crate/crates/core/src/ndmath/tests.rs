use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{max_relative_error, numeric_gradient};
use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Analytic-vs-numeric check of a scalar function of a parameter set.
fn check<F>(params: &ParamSet, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic = params.gather_grads(&g, &vars);
    let mut probe = params.clone();
    let numeric = numeric_gradient(
        |x| {
            probe.set_values(x).unwrap();
            let mut g = Graph::new();
            let vars = probe.bind_frozen(&mut g);
            let loss = build(&mut g, &vars);
            g.value(loss).item()
        },
        params.values(),
        1e-5,
    );
    max_relative_error(&analytic, &numeric)
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(g.value(x).shape(), &mut rng);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::identity(2));
    let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).shape(), &[1, 1]);
    assert_eq!(g.value(out).item(), 11.0);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(MathError::Shape { .. })));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut p = ParamSet::new();
    p.push("a", random(&[3, 4], &mut rng));
    p.push("b", random(&[4, 2], &mut rng));
    let err = check(&p, |g, v| {
        let m = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, m, 1)
    });
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let s = g.softmax_last(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);

    let z = g.constant(Tensor::scalar(0.0));
    let sg = g.sigmoid(z).unwrap();
    assert_eq!(g.value(sg).item(), 0.5);

    let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let ln = g.layer_norm_last(x, 0.0).unwrap();
    let y = g.value(ln).data();
    let mean = y.iter().sum::<f64>() / 3.0;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12);
    assert!((var - 1.0).abs() < 1e-12);
}

#[test]
fn broadcast_is_trailing_only() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let ok = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let bad = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let out = g.add(a, ok).unwrap();
    assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    assert!(matches!(g.add(a, bad), Err(MathError::Shape { .. })));
    assert!(matches!(g.mul(a, bad), Err(MathError::Shape { .. })));
}

#[test]
fn backward_quadratic_and_constant() {
    let mut g = Graph::new();
    let w = g.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[2.0, 4.0]);

    // A second call without reset accumulates.
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[4.0, 8.0]);
    g.zero_grad();
    assert!(g.grad(w).is_none());

    let mut g = Graph::new();
    let w = g.param(Tensor::vector(vec![1.0, 2.0]));
    let c = g.constant(Tensor::scalar(3.0));
    let zero = g.scale(w, 0.0).unwrap();
    let s = g.sum(zero).unwrap();
    let loss = g.add(s, c).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let w = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(g.backward(w), Err(MathError::NonScalarLoss(_))));
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![f64::MAX]));
    assert!(matches!(g.scale(x, 10.0), Err(MathError::NonFinite(_))));
}

#[test]
fn two_layer_mlp_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&[5, 3], &mut rng);
    let mut p = ParamSet::new();
    p.push("w1", random(&[3, 6], &mut rng));
    p.push("b1", random(&[6], &mut rng));
    p.push("a1", Tensor::vector(vec![0.25]));
    p.push("w2", random(&[6, 2], &mut rng));
    p.push("b2", random(&[2], &mut rng));
    let err = check(&p, |g, v| {
        let xi = g.constant(x.clone());
        let h = g.matmul(xi, v[0]).unwrap();
        let h = g.add(h, v[1]).unwrap();
        let h = g.prelu(h, v[2]).unwrap();
        let o = g.matmul(h, v[3]).unwrap();
        let o = g.add(o, v[4]).unwrap();
        let sq = g.mul(o, o).unwrap();
        g.mean(sq).unwrap()
    });
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn every_layer_type_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = ParamSet::new();
    p.push("x", random(&[4, 6], &mut rng));
    p.push("s", random(&[6], &mut rng));

    let cases: Vec<(&str, Box<dyn Fn(&mut Graph, &[Var]) -> Var>)> = vec![
        ("sigmoid", Box::new(|g, v| {
            let y = g.sigmoid(v[0]).unwrap();
            weighted_sum(g, y, 2)
        })),
        ("softmax", Box::new(|g, v| {
            let y = g.softmax_last(v[0]).unwrap();
            weighted_sum(g, y, 3)
        })),
        ("layer_norm", Box::new(|g, v| {
            let y = g.layer_norm_last(v[0], 1e-5).unwrap();
            weighted_sum(g, y, 4)
        })),
        ("batch_norm", Box::new(|g, v| {
            let y = g.batch_norm(v[0], 1e-5).unwrap();
            weighted_sum(g, y, 5)
        })),
        ("mul_sub_broadcast", Box::new(|g, v| {
            let y = g.mul(v[0], v[1]).unwrap();
            let y = g.sub(y, v[1]).unwrap();
            weighted_sum(g, y, 6)
        })),
        ("slice_expand_sum", Box::new(|g, v| {
            let y = g.slice_last(v[0], 1, 4).unwrap();
            let y = g.expand_last(y, 2).unwrap();
            let y = g.sum_last(y).unwrap();
            weighted_sum(g, y, 7)
        })),
        ("axis1", Box::new(|g, v| {
            let y = g.reshape(v[0], vec![2, 2, 6]).unwrap();
            let s = g.sum_axis1(y).unwrap();
            let e = g.expand_axis1(s, 3).unwrap();
            weighted_sum(g, e, 8)
        })),
        ("attention", Box::new(|g, v| {
            let y = g.reshape(v[0], vec![2, 2, 6]).unwrap();
            let k = g.mul(y, v[1]).unwrap();
            let q = g.scale(y, 1.3).unwrap();
            let a = g.attention(q, k, y, 2).unwrap();
            weighted_sum(g, a, 9)
        })),
    ];
    for (name, build) in cases {
        let err = check(&p, |g, v| build(g, v));
        assert!(err < 1e-4, "{name}: rel err {err}");
    }
}

#[test]
fn prelu_gradient_check_with_slope() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ParamSet::new();
    p.push("x", random(&[3, 5], &mut rng));
    p.push("alpha", Tensor::vector(vec![0.2]));
    let err = check(&p, |g, v| {
        let y = g.prelu(v[0], v[1]).unwrap();
        weighted_sum(g, y, 10)
    });
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn single_position_attention_is_identity_on_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut g = Graph::new();
    let q = g.constant(random(&[3, 1, 4], &mut rng));
    let k = g.constant(random(&[3, 1, 4], &mut rng));
    let v = g.constant(random(&[3, 1, 4], &mut rng));
    let out = g.attention(q, k, v, 2).unwrap();
    assert_eq!(g.value(out).data(), g.value(v).data());
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g = Graph::new();
        let a = g.constant(random(&[7, 5], &mut rng));
        let b = g.constant(random(&[5, 3], &mut rng));
        let m = g.matmul(a, b).unwrap();
        let s = g.softmax_last(m).unwrap();
        g.value(s).clone()
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
        let s = g.softmax_last(x).unwrap();
        for r in 0..3 {
            let total: f64 = g.value(s).row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_have_zero_mean(vals in proptest::collection::vec(-100.0f64..100.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 6], vals).unwrap());
        let y = g.layer_norm_last(x, 1e-5).unwrap();
        for r in 0..2 {
            let mean: f64 = g.value(y).row(r).iter().sum::<f64>() / 6.0;
            prop_assert!(mean.abs() < 1e-10);
        }
    }
}
