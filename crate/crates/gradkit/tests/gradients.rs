use gradkit::{gradcheck, Array, Result, Tape, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

const H: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, 1.0).unwrap();
    Array::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n: usize = shape.iter().product();
    let d = Uniform::new(lo, hi);
    Array::new(shape.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

/// Contracts a non-scalar output with fixed random weights so the check sees
/// every output coordinate.
fn project(t: &mut Tape, y: Var, w: &Array) -> Result<Var> {
    let w = t.var(w.clone());
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn shapes() -> Vec<[usize; 2]> {
    vec![[1, 1], [3, 5], [17, 8], [64, 64]]
}

#[test]
fn unary_primitives_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    type Unary = fn(&mut Tape, Var) -> Result<Var>;
    let ops: Vec<(&str, Unary)> = vec![
        ("tanh", |t, x| t.tanh(x)),
        ("silu", |t, x| t.silu(x)),
        ("exp", |t, x| t.exp(x)),
        ("softplus", |t, x| t.softplus(x)),
        ("scale", |t, x| t.scale(x, -2.5)),
        ("add_scalar", |t, x| t.add_scalar(x, 0.7)),
        ("row_sum", |t, x| t.row_sum(x)),
    ];
    for shape in shapes() {
        let x = randn(&mut rng, &shape);
        for (name, op) in &ops {
            let probe_shape = if *name == "row_sum" { [shape[0], 1] } else { shape };
            let w = randn(&mut rng, &probe_shape);
            let err = gradcheck(|t, v| {
                let y = op(t, v)?;
                project(t, y, &w)
            }, &x, H)
            .unwrap();
            assert!(err < 1e-5, "{name} {shape:?}: {err}");
        }
        let pos = uniform(&mut rng, &shape, 0.5, 3.0);
        let w = randn(&mut rng, &shape);
        let err = gradcheck(|t, v| {
            let y = t.log(v)?;
            project(t, y, &w)
        }, &pos, H)
        .unwrap();
        assert!(err < 1e-5, "log {shape:?}: {err}");
    }
}

#[test]
fn reductions_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for shape in shapes() {
        let x = randn(&mut rng, &shape);
        for (name, err) in [
            ("sum", gradcheck(|t, v| t.sum(v), &x, H).unwrap()),
            ("mean", gradcheck(|t, v| t.mean(v), &x, H).unwrap()),
            ("sq_norm", gradcheck(|t, v| t.sq_norm(v), &x, H).unwrap()),
        ] {
            assert!(err < 1e-5, "{name} {shape:?}: {err}");
        }
    }
}

#[test]
fn binary_primitives_pass_gradcheck_on_both_operands() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    type Binary = fn(&mut Tape, Var, Var) -> Result<Var>;
    let ops: Vec<(&str, Binary)> = vec![
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
    ];
    for shape in shapes() {
        let (r, c) = (shape[0], shape[1]);
        for rhs_shape in [vec![r, c], vec![1, c], vec![r, 1], vec![1]] {
            let a = randn(&mut rng, &shape);
            let b = randn(&mut rng, &rhs_shape);
            let w = randn(&mut rng, &shape);
            for (name, op) in &ops {
                let lhs_err = gradcheck(|t, v| {
                    let bv = t.var(b.clone());
                    let y = op(t, v, bv)?;
                    project(t, y, &w)
                }, &a, H)
                .unwrap();
                let rhs_err = gradcheck(|t, v| {
                    let av = t.var(a.clone());
                    let y = op(t, av, v)?;
                    project(t, y, &w)
                }, &b, H)
                .unwrap();
                assert!(lhs_err < 1e-5, "{name} lhs {shape:?}/{rhs_shape:?}: {lhs_err}");
                assert!(rhs_err < 1e-5, "{name} rhs {shape:?}/{rhs_shape:?}: {rhs_err}");
            }
        }
    }
}

#[test]
fn matmul_and_concat_pass_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for (m, k, n) in [(1, 1, 1), (4, 3, 5), (64, 64, 64)] {
        let a = randn(&mut rng, &[m, k]);
        let b = randn(&mut rng, &[k, n]);
        let w = randn(&mut rng, &[m, n]);
        let ea = gradcheck(|t, v| {
            let bv = t.var(b.clone());
            let y = t.matmul(v, bv)?;
            project(t, y, &w)
        }, &a, H)
        .unwrap();
        let eb = gradcheck(|t, v| {
            let av = t.var(a.clone());
            let y = t.matmul(av, v)?;
            project(t, y, &w)
        }, &b, H)
        .unwrap();
        assert!(ea < 1e-5 && eb < 1e-5, "matmul {m}x{k}x{n}: {ea} {eb}");
    }

    let a = randn(&mut rng, &[6, 3]);
    let b = randn(&mut rng, &[6, 4]);
    let w = randn(&mut rng, &[6, 10]);
    let err = gradcheck(|t, v| {
        let bv = t.var(b.clone());
        let y = t.concat(&[v, bv, v])?;
        project(t, y, &w)
    }, &a, H)
    .unwrap();
    assert!(err < 1e-5, "concat: {err}");
}

#[test]
fn quadratic_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let a = randn(&mut rng, &[5, 5]);
    let x = randn(&mut rng, &[5, 1]);
    let err = gradcheck(|t, v| {
        let av = t.var(a.clone());
        let ax = t.matmul(av, v)?;
        let p = t.mul(v, ax)?;
        t.sum(p)
    }, &x, H)
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn two_layer_tanh_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = randn(&mut rng, &[8, 3]);
    let w2 = randn(&mut rng, &[16, 2]);
    let target = randn(&mut rng, &[8, 2]);
    let w1 = randn(&mut rng, &[3, 16]);
    let err = gradcheck(|t, w| {
        let xv = t.var(x.clone());
        let h = t.matmul(xv, w)?;
        let h = t.tanh(h)?;
        let w2v = t.var(w2.clone());
        let y = t.matmul(h, w2v)?;
        let tv = t.var(target.clone());
        let r = t.sub(y, tv)?;
        let l = t.sq_norm(r)?;
        t.scale(l, 1.0 / 8.0)
    }, &w1, H)
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn f_expr(t: &mut Tape, x: Var) -> Result<Var> {
    let y = t.tanh(x)?;
    let y = t.mul(y, x)?;
    t.sum(y)
}

fn g_expr(t: &mut Tape, x: Var) -> Result<Var> {
    let y = t.softplus(x)?;
    t.sq_norm(y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_is_linear(data in prop::collection::vec(-3.0f64..3.0, 1..20), a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let x = Array::vector(data).unwrap();
        let grad_of = |build: &dyn Fn(&mut Tape, Var) -> Result<Var>| {
            let mut t = Tape::new();
            let v = t.var(x.clone());
            let y = build(&mut t, v).unwrap();
            t.backward_scalar(y).unwrap().get(v)
        };
        let gf = grad_of(&f_expr);
        let gg = grad_of(&g_expr);
        let combined = grad_of(&|t, v| {
            let f = f_expr(t, v)?;
            let g = g_expr(t, v)?;
            let fa = t.scale(f, a)?;
            let gb = t.scale(g, b)?;
            t.add(fa, gb)
        });
        for i in 0..x.len() {
            let expected = a * gf.data()[i] + b * gg.data()[i];
            prop_assert!((combined.data()[i] - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, &[7, 5]);
        let w = randn(&mut rng, &[5, 3]);
        let run = || {
            let mut t = Tape::new();
            let xv = t.var(x.clone());
            let wv = t.var(w.clone());
            let h = t.matmul(xv, wv).unwrap();
            let h = t.silu(h).unwrap();
            let l = t.mean(h).unwrap();
            let g = t.backward_scalar(l).unwrap();
            (t.value(l).clone(), g.get(xv), g.get(wv))
        };
        let first = run();
        let second = run();
        prop_assert_eq!(first.0.data(), second.0.data());
        prop_assert_eq!(first.1.data(), second.1.data());
        prop_assert_eq!(first.2.data(), second.2.data());
    }
}
