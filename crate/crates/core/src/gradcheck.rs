//! Central finite differences, used as the independent gradient oracle.

use rand::Rng;

use crate::error::Result;
use crate::models::{
    seeded, AeSpec, ArchitectureSpec, Classifier, ConvStage, DenoisingAutoencoder, LstmSpec,
    SequenceDetector, VaeSpec, VariationalAutoencoder,
};
use crate::tape::{Activation, LossKind, Tape, Var};
use crate::tensor::Tensor;

/// Step used by [`audit`].
pub const AUDIT_STEP: f64 = 1e-5;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_diff_gradient(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    probe.grad = None;
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as x")
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, with a `1e-8` floor on the denominator so
/// that two vanishing gradients compare equal.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

/// Worst relative error of one check over all its instances.
#[derive(Clone, Debug, PartialEq)]
pub struct GradAudit {
    pub name: String,
    pub instances: u64,
    pub worst: f64,
}

fn rand_t(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape matches data")
}

/// Reduces an op output to a scalar with fixed random weights.
fn weighted_sum(tape: &mut Tape<'_>, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = tape.input(rand_t(&shape, -1.0, 1.0, seed ^ 0xabc));
    let prod = tape.mul(out, w).expect("same shape");
    tape.sum(prod)
}

type Build = dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var>;

fn op_error(inputs: &[Tensor], seed: u64, build: &Build) -> Result<f64> {
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x)).collect();
        let out = build(&mut tape, &vars)?;
        let l = weighted_sum(&mut tape, out, seed);
        Ok(tape.value(l).item())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let out = build(&mut tape, &vars)?;
    let l = weighted_sum(&mut tape, out, seed);
    let grads = tape.backward(l)?;
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
                eval(&xs).unwrap_or(f64::NAN)
            },
            &inputs[i],
            AUDIT_STEP,
        );
        worst = worst.max(relative_error(&analytic, numeric.data()));
    }
    Ok(worst)
}

/// Central differences of `loss` with respect to every parameter, flattened.
fn param_numeric(params: &[Tensor], mut loss: impl FnMut(&[Tensor]) -> f64) -> Vec<f64> {
    let mut ps = params.to_vec();
    let mut out = Vec::new();
    for p in 0..ps.len() {
        for i in 0..ps[p].len() {
            let orig = ps[p].data()[i];
            ps[p].data_mut()[i] = orig + AUDIT_STEP;
            let up = loss(&ps);
            ps[p].data_mut()[i] = orig - AUDIT_STEP;
            let down = loss(&ps);
            ps[p].data_mut()[i] = orig;
            out.push((up - down) / (2.0 * AUDIT_STEP));
        }
    }
    out
}

fn flat(v: &[Vec<f64>]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

fn images(n: usize, shape: &[usize], seed: u64) -> Vec<Tensor> {
    (0..n)
        .map(|k| rand_t(shape, 0.0, 1.0, seed * 31 + k as u64))
        .collect()
}

fn classifier_error(spec: &ArchitectureSpec, seed: u64) -> Result<f64> {
    let model = Classifier::build(spec.clone(), seed)?;
    let xs = images(3, &spec.input_shape, 100 + seed);
    let refs: Vec<&Tensor> = xs.iter().collect();
    let ys: Vec<usize> = (0..3)
        .map(|i| (i + seed as usize) % spec.num_classes)
        .collect();
    let (_, analytic) = model.loss_and_grads(&refs, &ys)?;
    let numeric = param_numeric(model.params(), |ps| {
        let mut m = model.clone();
        m.params_mut().clone_from_slice(ps);
        m.loss_and_grads(&refs, &ys)
            .map(|r| r.0)
            .unwrap_or(f64::NAN)
    });
    Ok(relative_error(&flat(&analytic), &numeric))
}

fn ae_error(seed: u64) -> Result<f64> {
    let spec = AeSpec {
        input_shape: vec![1, 3, 3],
        hidden: 5,
        bottleneck: 2,
        activation: Activation::Tanh,
    };
    let ae = DenoisingAutoencoder::build(spec.clone(), seed)?;
    let clean = images(2, &spec.input_shape, 200 + seed);
    let noisy = images(2, &spec.input_shape, 300 + seed);
    let (c, n): (Vec<&Tensor>, Vec<&Tensor>) = (clean.iter().collect(), noisy.iter().collect());
    let (_, analytic) = ae.loss_and_grads(&n, &c)?;
    let numeric = param_numeric(ae.params(), |ps| {
        let mut m = ae.clone();
        m.params_mut().clone_from_slice(ps);
        m.loss_and_grads(&n, &c).map(|r| r.0).unwrap_or(f64::NAN)
    });
    Ok(relative_error(&flat(&analytic), &numeric))
}

fn vae_error(seed: u64) -> Result<f64> {
    let spec = VaeSpec {
        input_shape: vec![1, 3, 3],
        hidden: 5,
        latent_dim: 2,
        activation: Activation::Tanh,
    };
    let vae = VariationalAutoencoder::build(spec.clone(), seed)?;
    let xs = images(2, &spec.input_shape, 400 + seed);
    let refs: Vec<&Tensor> = xs.iter().collect();
    let eta = rand_t(&[2, 2], -1.5, 1.5, 500 + seed);
    let (_, analytic) = vae.loss_and_grads(&refs, &eta, 0.7)?;
    let numeric = param_numeric(vae.params(), |ps| {
        let mut m = vae.clone();
        m.params_mut().clone_from_slice(ps);
        m.loss_and_grads(&refs, &eta, 0.7)
            .map(|r| r.0)
            .unwrap_or(f64::NAN)
    });
    Ok(relative_error(&flat(&analytic), &numeric))
}

fn lstm_error(seed: u64) -> Result<f64> {
    let det = SequenceDetector::build(
        LstmSpec {
            input_dim: 3,
            hidden: 4,
        },
        seed,
    )?;
    let mut rng = seeded(600 + seed);
    let seqs: Vec<Vec<Vec<f64>>> = (0..2)
        .map(|k| {
            (0..3 + k)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        })
        .collect();
    let refs: Vec<&[Vec<f64>]> = seqs.iter().map(Vec::as_slice).collect();
    let labels = [1.0, 0.0];
    let (_, analytic) = det.loss_and_grads(&refs, &labels)?;
    let numeric = param_numeric(det.params(), |ps| {
        let mut m = det.clone();
        m.params_mut().clone_from_slice(ps);
        m.loss_and_grads(&refs, &labels)
            .map(|r| r.0)
            .unwrap_or(f64::NAN)
    });
    Ok(relative_error(&flat(&analytic), &numeric))
}

/// Compares tape gradients of every differentiable op and every model kind
/// against central differences over `instances` random draws each.
pub fn audit(instances: u64) -> Result<Vec<GradAudit>> {
    let u = |shape: &[usize], s: u64| rand_t(shape, -1.0, 1.0, s);
    let mut ops: Vec<(String, Box<dyn Fn(u64) -> Vec<Tensor>>, Box<Build>)> = vec![
        (
            "matmul".into(),
            Box::new(move |s| vec![u(&[3, 4], s), u(&[4, 2], s + 100)]),
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "add_bias".into(),
            Box::new(move |s| vec![u(&[3, 5], s), u(&[5], s + 1)]),
            Box::new(|t, v| t.add_bias(v[0], v[1])),
        ),
        (
            "channel_bias".into(),
            Box::new(move |s| vec![u(&[2, 3, 4, 4], s), u(&[3], s + 1)]),
            Box::new(|t, v| t.channel_bias(v[0], v[1])),
        ),
        (
            "add/sub/mul/scale".into(),
            Box::new(move |s| vec![u(&[2, 3], s), u(&[2, 3], s + 1), u(&[2, 3], s + 2)]),
            Box::new(|t, v| {
                let a = t.add(v[0], v[1])?;
                let b = t.sub(a, v[2])?;
                let c = t.mul(b, v[0])?;
                let d = t.scale(c, -1.7);
                Ok(t.add_scalar(d, 0.3))
            }),
        ),
        (
            "exp".into(),
            Box::new(move |s| vec![u(&[6], s)]),
            Box::new(|t, v| Ok(t.exp(v[0]))),
        ),
        (
            "softmax".into(),
            Box::new(move |s| vec![u(&[3, 4], s)]),
            Box::new(|t, v| Ok(t.softmax(v[0]))),
        ),
        (
            "sum".into(),
            Box::new(move |s| vec![u(&[7], s)]),
            Box::new(|t, v| Ok(t.sum(v[0]))),
        ),
        (
            "mean".into(),
            Box::new(move |s| vec![u(&[2, 7], s)]),
            Box::new(|t, v| Ok(t.mean(v[0]))),
        ),
        (
            "reshape".into(),
            Box::new(move |s| vec![u(&[2, 6], s)]),
            Box::new(|t, v| t.reshape(v[0], &[3, 4])),
        ),
        (
            "cross_entropy".into(),
            Box::new(|s| {
                vec![
                    rand_t(&[3, 4], 0.05, 1.0, s),
                    rand_t(&[3, 4], 0.0, 1.0, s + 1),
                ]
            }),
            Box::new(|t, v| t.loss(v[0], v[1], LossKind::CrossEntropy)),
        ),
        (
            "mse".into(),
            Box::new(move |s| vec![u(&[3, 4], s), u(&[3, 4], s + 1)]),
            Box::new(|t, v| t.loss(v[0], v[1], LossKind::Mse)),
        ),
        (
            "bce".into(),
            Box::new(|s| vec![rand_t(&[5], 0.05, 0.95, s), rand_t(&[5], 0.0, 1.0, s + 1)]),
            Box::new(|t, v| t.loss(v[0], v[1], LossKind::BinaryCrossEntropy)),
        ),
    ];
    for kind in [Activation::Relu, Activation::Sigmoid, Activation::Tanh] {
        ops.push((
            format!("{kind:?}").to_lowercase(),
            Box::new(move |s| vec![u(&[4, 5], s)]),
            Box::new(move |t, v| Ok(t.activation(v[0], kind))),
        ));
    }
    for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        ops.push((
            format!("conv2d stride {stride} pad {pad}"),
            Box::new(move |s| vec![u(&[2, 2, 5, 5], s), u(&[3, 2, 3, 3], s + 1)]),
            Box::new(move |t, v| t.conv2d(v[0], v[1], stride, pad)),
        ));
    }
    let mut out = Vec::new();
    for (name, inputs, build) in &ops {
        let mut worst: f64 = 0.0;
        for s in 0..instances {
            worst = worst.max(op_error(&inputs(s), s, build.as_ref())?);
        }
        out.push(GradAudit {
            name: name.clone(),
            instances,
            worst,
        });
    }
    let mlp = ArchitectureSpec::mlp(&[5, 4], Activation::Tanh, &[1, 4, 4], 3);
    let stage = |channels, stride| ConvStage {
        channels,
        kernel: 3,
        stride,
    };
    let conv = ArchitectureSpec::convnet(
        &[stage(2, 1), stage(3, 2)],
        &[4],
        Activation::Tanh,
        &[1, 5, 5],
        3,
    );
    let models: [(&str, Box<dyn Fn(u64) -> Result<f64>>); 5] = [
        ("mlp", Box::new(move |s| classifier_error(&mlp, s))),
        ("convnet", Box::new(move |s| classifier_error(&conv, s))),
        ("autoencoder", Box::new(ae_error)),
        ("vae", Box::new(vae_error)),
        ("lstm", Box::new(lstm_error)),
    ];
    for (name, f) in &models {
        let mut worst: f64 = 0.0;
        for s in 0..instances {
            worst = worst.max(f(s)?);
        }
        out.push(GradAudit {
            name: name.to_string(),
            instances,
            worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_gives_ones() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 4.0]);
        let g = finite_diff_gradient(|t| t.data().iter().sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_gradient(|t| t.item() * t.item(), &x, 1e-5);
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn audit_covers_ops_and_models() {
        let a = audit(2).unwrap();
        for name in [
            "matmul",
            "conv2d stride 2 pad 1",
            "relu",
            "mlp",
            "vae",
            "lstm",
        ] {
            assert!(a.iter().any(|g| g.name == name), "{name}");
        }
        for g in &a {
            assert!(g.worst < 1e-4, "{g:?}");
        }
    }
}
