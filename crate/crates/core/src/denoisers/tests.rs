use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffusion::TrainCtx;
use crate::ndmath::gradcheck::{max_relative_error, numeric_gradient};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize(den: &mut dyn Denoiser, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    den.params_mut().values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.8..0.8));
}

struct Inputs {
    y: Tensor,
    t: Tensor,
    c: Tensor,
}

fn inputs(b: usize, d: usize, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Inputs {
        y: random(&[b, d], &mut rng),
        t: Tensor::new(vec![b, 1], (0..b).map(|_| rng.gen_range(0.01..1.0)).collect()).unwrap(),
        c: random(&[b, 2], &mut rng),
    }
}

fn eval(den: &dyn Denoiser, x: &Inputs) -> Tensor {
    let mut g = Graph::new();
    let p = den.params().bind_frozen(&mut g);
    let (y, t, c) = (g.constant(x.y.clone()), g.constant(x.t.clone()), g.constant(x.c.clone()));
    let cond = den.condition(&mut g, &p, c).unwrap();
    let out = den.predict(&mut g, &p, y, t, cond, &mut Phase::Eval).unwrap();
    g.value(out).clone()
}

/// Weighted-sum loss through `build`, analytic vs central differences.
fn gradcheck<D: Denoiser + Clone>(den: &D, build: impl Fn(&D, &mut Graph, &[Var]) -> Var) -> f64 {
    let weights = {
        let mut g = Graph::new();
        let p = den.params().bind_frozen(&mut g);
        let out = build(den, &mut g, &p);
        random(g.value(out).shape(), &mut ChaCha8Rng::seed_from_u64(77))
    };
    let loss = |den: &D, g: &mut Graph, p: &[Var]| {
        let out = build(den, g, p);
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).unwrap();
        g.sum(prod).unwrap()
    };
    let mut g = Graph::new();
    let p = den.params().bind(&mut g);
    let l = loss(den, &mut g, &p);
    g.backward(l).unwrap();
    let analytic = den.params().gather_grads(&g, &p);
    let mut probe = den.clone();
    let numeric = numeric_gradient(
        |x| {
            probe.params_mut().set_values(x).unwrap();
            let mut g = Graph::new();
            let p = probe.params().bind_frozen(&mut g);
            let l = loss(&probe, &mut g, &p);
            g.value(l).item()
        },
        den.params().values(),
        1e-5,
    );
    max_relative_error(&analytic, &numeric)
}

fn small_mlp(batchnorm: bool) -> FilmMlp {
    let cfg = FilmMlpConfig { hidden_widths: vec![5, 4], dropout_rate: 0.0, use_batchnorm: batchnorm, covariate_mlp_widths: vec![3] };
    let mut m = FilmMlp::new(cfg, 3, 2, &mut ChaCha8Rng::seed_from_u64(1));
    randomize(&mut m, 2);
    m
}

fn small_saint(depth: usize) -> Saint {
    let cfg = SaintConfig { d_model: 8, n_heads: 2, depth, ff_width: 6, dropout_rate: 0.0, intersample_prob: 0.5 };
    let mut s = Saint::new(cfg, 3, 2, &mut ChaCha8Rng::seed_from_u64(3));
    randomize(&mut s, 4);
    s
}

#[test]
fn film_arithmetic() {
    let mut g = Graph::new();
    let h = g.constant(Tensor::vector(vec![1.0, 2.0]));
    let dg = g.constant(Tensor::vector(vec![1.0, 1.0]));
    let b = g.constant(Tensor::vector(vec![1.0, 1.0]));
    let out = film(&mut g, h, dg, b).unwrap();
    assert_eq!(g.value(out).data(), &[3.0, 5.0]);
}

#[test]
fn film_identity_collapses_to_plain_mlp() {
    let mut m = small_mlp(false);
    for name in ["film.w", "film.b"] {
        let i = m.params().index_of(name).unwrap();
        m.params_mut().slice_mut(i).fill(0.0);
    }
    let x = inputs(4, 3, 5);
    let out = eval(&m, &x);

    // Plain MLP evaluated with loops.
    let p = m.params();
    let get = |n: &str| p.tensor(p.index_of(n).unwrap());
    let prelu = |v: f64, a: f64| if v > 0.0 { v } else { a * v };
    for r in 0..4 {
        let mut h: Vec<f64> = (0..5)
            .map(|j| {
                let (w, wt, b) = (get("hidden0.w"), get("hidden0.wt"), get("hidden0.b"));
                let s: f64 = (0..3).map(|i| x.y.row(r)[i] * w.data()[i * 5 + j]).sum();
                s + x.t.row(r)[0] * wt.data()[j] + b.data()[j]
            })
            .collect();
        let a0 = get("hidden0.prelu").item();
        h.iter_mut().for_each(|v| *v = prelu(*v, a0));
        let (w, b, a1) = (get("hidden1.w"), get("hidden1.b"), get("hidden1.prelu").item());
        let h: Vec<f64> = (0..4).map(|j| prelu((0..5).map(|i| h[i] * w.data()[i * 4 + j]).sum::<f64>() + b.data()[j], a1)).collect();
        let (w, b) = (get("out.w"), get("out.b"));
        for j in 0..3 {
            let o: f64 = (0..4).map(|i| h[i] * w.data()[i * 3 + j]).sum::<f64>() + b.data()[j];
            assert!((o - out.row(r)[j]).abs() < 1e-12);
        }
    }

    // With FiLM at identity the covariates have no effect.
    let mut other = inputs(4, 3, 5);
    other.c = other.c.map(|v| v + 1.0);
    assert_eq!(eval(&m, &other), out);
}

#[test]
fn conditioning_is_live() {
    let m = small_mlp(false);
    let x = inputs(2, 3, 6);
    let mut bumped = inputs(2, 3, 6);
    bumped.c = bumped.c.map(|v| v + 1e-4);
    assert!(eval(&m, &x).max_abs_diff(&eval(&m, &bumped)) > 1e-8);

    let s = small_saint(1);
    assert!(eval(&s, &x).max_abs_diff(&eval(&s, &bumped)) > 1e-8);
}

#[test]
fn mlp_gradient_check() {
    let x = inputs(6, 3, 7);
    for bn in [false, true] {
        let m = small_mlp(bn);
        let err = gradcheck(&m, |den, g, p| {
            let (y, t, c) = (g.constant(x.y.clone()), g.constant(x.t.clone()), g.constant(x.c.clone()));
            let cond = den.condition(g, p, c).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut phase = Phase::Train(TrainCtx { rng: &mut rng, norm_nodes: vec![] });
            den.predict(g, p, y, t, cond, &mut phase).unwrap()
        });
        assert!(err < 1e-4, "batchnorm={bn}: rel err {err}");
    }
}

#[test]
fn saint_gradient_check_both_modes() {
    let x = inputs(4, 3, 8);
    let s = small_saint(1);
    for mode in [RowMode::Intersample, RowMode::Degenerate] {
        let err = gradcheck(&s, |den, g, p| {
            let (y, t, c) = (g.constant(x.y.clone()), g.constant(x.t.clone()), g.constant(x.c.clone()));
            let cond = den.condition(g, p, c).unwrap();
            den.forward_with_mode(g, p, y, t, cond, mode).unwrap()
        });
        assert!(err < 1e-4, "{mode:?}: rel err {err}");
    }
}

#[test]
fn tokenizer_example_and_equivariance() {
    let cfg = SaintConfig { d_model: 2, n_heads: 1, depth: 0, ff_width: 2, dropout_rate: 0.0, intersample_prob: 0.5 };
    let mut s = Saint::new(cfg, 1, 2, &mut ChaCha8Rng::seed_from_u64(0));
    let set = |s: &mut Saint, name: &str, v: &[f64]| {
        let i = s.params().index_of(name).unwrap();
        s.params_mut().slice_mut(i).copy_from_slice(v);
    };
    set(&mut s, "tok.weight", &[1.0, 1.0]);
    set(&mut s, "tok.bias", &[0.0, 0.0]);
    set(&mut s, "tok.column", &[0.5, -0.5]);
    set(&mut s, "tok.cov.w", &[0.0; 4]);
    set(&mut s, "tok.cov.b", &[0.0; 2]);
    set(&mut s, "tok.time", &[0.0; 2]);
    let mut g = Graph::new();
    let p = s.params().bind_frozen(&mut g);
    let y = g.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
    let t = g.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
    let c = g.constant(Tensor::new(vec![1, 2], vec![0.3, 1.0]).unwrap());
    let cond = s.condition(&mut g, &p, c).unwrap();
    let tok = s.tokenize(&mut g, &p, y, t, cond).unwrap();
    assert_eq!(g.value(tok).data(), &[2.5, 1.5]);

    // Permuting features together with their column parameters permutes tokens.
    let s = small_saint(0);
    let x = inputs(2, 3, 9);
    let perm = [2usize, 0, 1];
    let tokens = |s: &Saint, y: &Tensor| {
        let mut g = Graph::new();
        let p = s.params().bind_frozen(&mut g);
        let (yv, t, c) = (g.constant(y.clone()), g.constant(x.t.clone()), g.constant(x.c.clone()));
        let cond = s.condition(&mut g, &p, c).unwrap();
        let tok = s.tokenize(&mut g, &p, yv, t, cond).unwrap();
        g.value(tok).clone()
    };
    let base = tokens(&s, &x.y);
    let mut sp = s.clone();
    for name in ["tok.weight", "tok.bias", "tok.column"] {
        let i = s.params().index_of(name).unwrap();
        let src = s.params().slice(i).to_vec();
        let dst = sp.params_mut().slice_mut(i);
        for (new, &old) in perm.iter().enumerate() {
            dst[new * 8..(new + 1) * 8].copy_from_slice(&src[old * 8..(old + 1) * 8]);
        }
    }
    let yp = Tensor::new(vec![2, 3], (0..2).flat_map(|r| perm.map(|j| x.y.row(r)[j])).collect()).unwrap();
    let permuted = tokens(&sp, &yp);
    for r in 0..2 {
        for (new, &old) in perm.iter().enumerate() {
            let a = &permuted.data()[(r * 3 + new) * 8..(r * 3 + new + 1) * 8];
            let b = &base.data()[(r * 3 + old) * 8..(r * 3 + old + 1) * 8];
            assert_eq!(a, b);
        }
    }
}

fn run_mode(s: &Saint, x: &Inputs, mode: RowMode) -> Tensor {
    let mut g = Graph::new();
    let p = s.params().bind_frozen(&mut g);
    let (y, t, c) = (g.constant(x.y.clone()), g.constant(x.t.clone()), g.constant(x.c.clone()));
    let cond = s.condition(&mut g, &p, c).unwrap();
    let out = s.forward_with_mode(&mut g, &p, y, t, cond, mode).unwrap();
    g.value(out).clone()
}

#[test]
fn row_attention_modes() {
    let s = small_saint(2);
    let one = inputs(1, 3, 10);
    assert_eq!(run_mode(&s, &one, RowMode::Intersample), run_mode(&s, &one, RowMode::Degenerate));

    // Two identical rows get identical outputs under intersample mixing.
    let twin = Inputs {
        y: Tensor::new(vec![2, 3], [one.y.data(), one.y.data()].concat()).unwrap(),
        t: Tensor::new(vec![2, 1], [one.t.data(), one.t.data()].concat()).unwrap(),
        c: Tensor::new(vec![2, 2], [one.c.data(), one.c.data()].concat()).unwrap(),
    };
    let out = run_mode(&s, &twin, RowMode::Intersample);
    assert_eq!(out.row(0), out.row(1));

    // Intersample mode does couple rows.
    let mut x = inputs(3, 3, 11);
    let a = run_mode(&s, &x, RowMode::Intersample);
    let mut data = x.y.data().to_vec();
    data[8] += 1.0;
    x.y = Tensor::new(vec![3, 3], data).unwrap();
    let b = run_mode(&s, &x, RowMode::Intersample);
    assert_ne!(a.row(0), b.row(0));
    let a = run_mode(&s, &inputs(3, 3, 11), RowMode::Degenerate);
    let b = run_mode(&s, &x, RowMode::Degenerate);
    assert_eq!(a.row(0), b.row(0));
}

#[test]
fn single_token_column_attention_passes_values() {
    let cfg = SaintConfig { d_model: 4, n_heads: 2, depth: 1, ff_width: 4, dropout_rate: 0.0, intersample_prob: 0.5 };
    let mut s = Saint::new(cfg, 1, 2, &mut ChaCha8Rng::seed_from_u64(5));
    randomize(&mut s, 6);
    // D = 1 must run and stay row-local in eval.
    let x = inputs(5, 1, 12);
    let all = eval(&s, &x);
    let first = eval(&s, &Inputs { y: x.y.select_rows(&[0]), t: x.t.select_rows(&[0]), c: x.c.select_rows(&[0]) });
    assert_eq!(all.row(0), first.row(0));
}

#[test]
fn eval_is_batch_invariant() {
    let s = small_saint(2);
    let x = inputs(32, 3, 13);
    let full = eval(&s, &x);
    for r in [0, 7, 31] {
        let single = eval(&s, &Inputs { y: x.y.select_rows(&[r]), t: x.t.select_rows(&[r]), c: x.c.select_rows(&[r]) });
        assert_eq!(single.row(0), full.row(r), "row {r}");
    }
    let m = small_mlp(true);
    let full = eval(&m, &x);
    let single = eval(&m, &Inputs { y: x.y.select_rows(&[5]), t: x.t.select_rows(&[5]), c: x.c.select_rows(&[5]) });
    assert_eq!(single.row(0), full.row(5));
}

#[test]
fn zero_depth_saint_runs() {
    let s = small_saint(0);
    let out = eval(&s, &inputs(3, 3, 14));
    assert_eq!(out.shape(), &[3, 3]);
}

#[test]
fn batchnorm_running_statistics_track_batches() {
    let mut m = small_mlp(true);
    let x = inputs(64, 3, 15);
    let before = eval(&m, &x);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..5 {
        let mut g = Graph::new();
        let p = m.params().bind(&mut g);
        let (y, t, c) = (g.constant(x.y.clone()), g.constant(x.t.clone()), g.constant(x.c.clone()));
        let cond = m.condition(&mut g, &p, c).unwrap();
        let mut phase = Phase::Train(TrainCtx { rng: &mut rng, norm_nodes: vec![] });
        m.predict(&mut g, &p, y, t, cond, &mut phase).unwrap();
        let Phase::Train(ctx) = phase else { unreachable!() };
        assert_eq!(ctx.norm_nodes.len(), 2);
        m.observe_batch(&g, &ctx.norm_nodes);
    }
    assert!(eval(&m, &x).max_abs_diff(&before) > 1e-6);
}

#[test]
fn config_validation() {
    assert!(SaintConfig { d_model: 10, n_heads: 4, ..SaintConfig::default() }.validate().is_err());
    assert!(FilmMlpConfig { dropout_rate: 1.0, ..FilmMlpConfig::default() }.validate().is_err());
    assert!(FilmMlpConfig { hidden_widths: vec![], ..FilmMlpConfig::default() }.validate().is_err());
    let cfg = BackboneConfig::default_for("saint").unwrap();
    let json = serde_json::to_string(&cfg).unwrap();
    assert_eq!(serde_json::from_str::<BackboneConfig>(&json).unwrap(), cfg);
    assert!(BackboneConfig::default_for("gamlss").is_none());
}
