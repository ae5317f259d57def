use dnd_core::gradcheck::{finite_diff_gradient, relative_error};
use dnd_core::models::seeded;
use dnd_core::tensor::{self, Tensor};
use dnd_core::{Activation, Error, LossKind, Tape, Var};
use proptest::prelude::*;
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

/// Reduces `out` to a scalar with fixed random weights so every output
/// element contributes a distinct sensitivity.
fn weighted_sum(tape: &mut Tape<'_>, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = Tensor::uniform(&shape, 1.0, &mut seeded(seed ^ 0xabc));
    let wv = tape.input(w);
    let prod = tape.mul(out, wv).unwrap();
    tape.sum(prod)
}

/// Largest relative error between tape gradients and finite differences
/// over every input of `build`.
fn check_op(inputs: &[Tensor], seed: u64, build: impl Fn(&mut Tape<'_>, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x)).collect();
        let out = build(&mut tape, &vars);
        let l = weighted_sum(&mut tape, out, seed);
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let out = build(&mut tape, &vars);
    let l = weighted_sum(&mut tape, out, seed);
    let grads = tape.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let numeric = finite_diff_gradient(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[i] = probe.clone();
                eval(&xs)
            },
            &inputs[i],
            H,
        );
        worst = worst.max(relative_error(&analytic, numeric.data()));
    }
    worst
}

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut seeded(seed))
}

/// Uniform in `[lo, hi]`, used where an op needs positive inputs.
fn rand_range(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn assert_all_instances(name: &str, f: impl Fn(u64) -> f64) {
    for s in 0..INSTANCES {
        let e = f(s);
        assert!(e < TOL, "{name} instance {s}: relative error {e:e}");
    }
}

#[test]
fn matmul_gradients() {
    assert_all_instances("matmul", |s| {
        let a = rand_t(&[3, 4], s);
        let b = rand_t(&[4, 2], s + 100);
        check_op(&[a, b], s, |t, v| t.matmul(v[0], v[1]).unwrap())
    });
}

#[test]
fn bias_gradients() {
    assert_all_instances("add_bias", |s| {
        check_op(&[rand_t(&[3, 5], s), rand_t(&[5], s + 1)], s, |t, v| {
            t.add_bias(v[0], v[1]).unwrap()
        })
    });
    assert_all_instances("channel_bias", |s| {
        check_op(
            &[rand_t(&[2, 3, 4, 4], s), rand_t(&[3], s + 1)],
            s,
            |t, v| t.channel_bias(v[0], v[1]).unwrap(),
        )
    });
}

#[test]
fn elementwise_gradients() {
    assert_all_instances("add/sub/mul", |s| {
        let ins = [
            rand_t(&[2, 3], s),
            rand_t(&[2, 3], s + 1),
            rand_t(&[2, 3], s + 2),
        ];
        check_op(&ins, s, |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let b = t.sub(a, v[2]).unwrap();
            let c = t.mul(b, v[0]).unwrap();
            let d = t.scale(c, -1.7);
            t.add_scalar(d, 0.3)
        })
    });
    assert_all_instances("exp", |s| {
        check_op(&[rand_t(&[6], s)], s, |t, v| t.exp(v[0]))
    });
}

#[test]
fn activation_gradients() {
    for kind in [Activation::Relu, Activation::Sigmoid, Activation::Tanh] {
        assert_all_instances(&format!("{kind:?}"), |s| {
            check_op(&[rand_t(&[4, 5], s)], s, |t, v| t.activation(v[0], kind))
        });
    }
}

#[test]
fn softmax_and_reductions() {
    assert_all_instances("softmax", |s| {
        check_op(&[rand_t(&[3, 4], s)], s, |t, v| t.softmax(v[0]))
    });
    assert_all_instances("sum", |s| {
        check_op(&[rand_t(&[7], s)], s, |t, v| t.sum(v[0]))
    });
    assert_all_instances("mean", |s| {
        check_op(&[rand_t(&[2, 7], s)], s, |t, v| t.mean(v[0]))
    });
    assert_all_instances("reshape", |s| {
        check_op(&[rand_t(&[2, 6], s)], s, |t, v| {
            t.reshape(v[0], &[3, 4]).unwrap()
        })
    });
}

#[test]
fn loss_gradients() {
    assert_all_instances("cross_entropy", |s| {
        let p = rand_range(&[3, 4], 0.05, 1.0, s);
        let tgt = rand_range(&[3, 4], 0.0, 1.0, s + 1);
        check_op(&[p, tgt], s, |t, v| {
            t.loss(v[0], v[1], LossKind::CrossEntropy).unwrap()
        })
    });
    assert_all_instances("mse", |s| {
        check_op(&[rand_t(&[3, 4], s), rand_t(&[3, 4], s + 1)], s, |t, v| {
            t.loss(v[0], v[1], LossKind::Mse).unwrap()
        })
    });
    assert_all_instances("bce", |s| {
        let p = rand_range(&[5], 0.05, 0.95, s);
        let tgt = rand_range(&[5], 0.0, 1.0, s + 1);
        check_op(&[p, tgt], s, |t, v| {
            t.loss(v[0], v[1], LossKind::BinaryCrossEntropy).unwrap()
        })
    });
}

#[test]
fn conv2d_gradients() {
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        assert_all_instances(&format!("conv2d s{stride} p{pad}"), |s| {
            let x = rand_t(&[2, 2, 5, 5], s);
            let k = rand_t(&[3, 2, 3, 3], s + 1);
            check_op(&[x, k], s, |t, v| {
                t.conv2d(v[0], v[1], stride, pad).unwrap()
            })
        });
    }
    // unbatched input of the documented shape
    assert_all_instances("conv2d rank 3", |s| {
        let x = rand_t(&[1, 4, 4], s);
        let k = rand_t(&[2, 1, 3, 3], s + 1);
        check_op(&[x, k], s, |t, v| t.conv2d(v[0], v[1], 1, 1).unwrap())
    });
}

#[test]
fn backward_of_sum_is_ones() {
    let x = rand_t(&[4, 3], 1);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let l = tape.sum(v);
    let g = tape.backward(l).unwrap();
    assert!(g.get(v).unwrap().iter().all(|&d| d == 1.0));
}

#[test]
fn linear_mse_closed_form() {
    // loss = mse(w·x, y) for a single output: ∂/∂w = 2(w·x − y)·x
    let w = Tensor::new(vec![1, 3], vec![0.4, -1.1, 0.7]).unwrap();
    let x = Tensor::new(vec![3, 1], vec![1.5, 0.2, -0.8]).unwrap();
    let y = Tensor::new(vec![1, 1], vec![0.25]).unwrap();
    let mut tape = Tape::new();
    let (wv, xv, yv) = (tape.leaf(&w), tape.leaf(&x), tape.leaf(&y));
    let p = tape.matmul(wv, xv).unwrap();
    let l = tape.loss(p, yv, LossKind::Mse).unwrap();
    let g = tape.backward(l).unwrap();
    let pred: f64 = w.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    for (gw, xi) in g.get(wv).unwrap().iter().zip(x.data()) {
        assert!((gw - 2.0 * (pred - 0.25) * xi).abs() < 1e-12);
    }
}

#[test]
fn tanh_derivative_at_zero_is_exactly_one() {
    let x = Tensor::scalar(0.0);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let y = tape.activation(v, Activation::Tanh);
    let l = tape.sum(y);
    assert_eq!(tape.backward(l).unwrap().get(v).unwrap(), &[1.0]);
}

#[test]
fn activation_values() {
    let x = Tensor::from_vec(vec![-1.0, 0.0, 2.0]);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let r = tape.activation(v, Activation::Relu);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = Tensor::scalar(0.0);
    let zv = tape.leaf(&z);
    let s = tape.activation(zv, Activation::Sigmoid);
    assert_eq!(tape.value(s).item(), 0.5);
}

#[test]
fn loss_values() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::from_vec(vec![0.3, 0.9]));
    let x2 = tape.input(Tensor::from_vec(vec![0.3, 0.9]));
    let m = tape.loss(x, x2, LossKind::Mse).unwrap();
    assert_eq!(tape.value(m).item(), 0.0);
    let p = tape.input(Tensor::from_vec(vec![1.0, 0.0]));
    let t = tape.input(Tensor::from_vec(vec![1.0, 0.0]));
    let ce = tape.loss(p, t, LossKind::CrossEntropy).unwrap();
    assert!(tape.value(ce).item() <= 1e-11);
    let p = tape.input(Tensor::from_vec(vec![0.5, 0.5]));
    let ce = tape.loss(p, t, LossKind::CrossEntropy).unwrap();
    assert!((tape.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-11);
    let bad = tape.input(Tensor::from_vec(vec![0.5, 0.5, 0.0]));
    assert!(matches!(
        tape.loss(bad, t, LossKind::Mse),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn backward_needs_scalar() {
    let x = rand_t(&[3], 2);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let y = tape.exp(v);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn finite_diff_agrees_with_backward_on_two_layer_net() {
    let w1 = rand_t(&[5, 6], 3);
    let b1 = rand_t(&[6], 4);
    let w2 = rand_t(&[6, 3], 5);
    let x = rand_t(&[2, 5], 6);
    let e = check_op(&[x, w1, b1, w2], 9, |t, v| {
        let h = t.matmul(v[0], v[1]).unwrap();
        let h = t.add_bias(h, v[2]).unwrap();
        let h = t.activation(h, Activation::Tanh);
        let o = t.matmul(h, v[3]).unwrap();
        t.softmax(o)
    });
    assert!(e < TOL, "{e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        logits in prop::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let a = tensor::softmax(&Tensor::from_vec(logits.clone()));
        let b = tensor::softmax(&Tensor::from_vec(logits.iter().map(|v| v + shift).collect()));
        prop_assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(a.data().iter().all(|&p| p >= 0.0 && p.is_finite()));
        prop_assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn matmul_is_associative(seed in 0u64..10_000, m in 1usize..5, k in 1usize..5, n in 1usize..5, p in 1usize..5) {
        let a = rand_t(&[m, k], seed);
        let b = rand_t(&[k, n], seed + 1);
        let c = rand_t(&[n, p], seed + 2);
        let left = tensor::matmul(&tensor::matmul(&a, &b).unwrap(), &c).unwrap();
        let right = tensor::matmul(&a, &tensor::matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right) < 1e-9);
    }

    #[test]
    fn ops_stay_finite(xs in prop::collection::vec(-30.0f64..30.0, 4)) {
        let x = Tensor::new(vec![2, 2], xs).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let s = tape.softmax(v);
        let sg = tape.activation(v, Activation::Sigmoid);
        let th = tape.activation(v, Activation::Tanh);
        let p = tape.mul(s, sg).unwrap();
        let q = tape.add(p, th).unwrap();
        let l = tape.loss(s, sg, LossKind::CrossEntropy).unwrap();
        let g = tape.backward(l).unwrap();
        prop_assert!(tape.value(q).is_finite());
        prop_assert!(g.get(v).unwrap().iter().all(|d| d.is_finite()));
    }
}
