use dnd_core::data::{gen_synthetic_dataset, DatasetConfig};
use dnd_core::gradcheck::relative_error;
use dnd_core::models::{
    seeded, AeSpec, ArchitectureSpec, Checkpoint, Classifier, ConvStage, DenoisingAutoencoder,
    LstmSpec, SequenceDetector, TrainConfig, VaeSpec, VariationalAutoencoder,
};
use dnd_core::{Activation, Tensor};
use proptest::prelude::*;
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn images(n: usize, shape: &[usize], seed: u64) -> Vec<Tensor> {
    let mut rng = seeded(seed);
    let len: usize = shape.iter().product();
    (0..n)
        .map(|_| {
            Tensor::new(
                shape.to_vec(),
                (0..len).map(|_| rng.random_range(0.0..1.0)).collect(),
            )
            .unwrap()
        })
        .collect()
}

/// Central differences of `loss` with respect to every parameter.
fn numeric_grads(params: &mut [Tensor], mut loss: impl FnMut(&[Tensor]) -> f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            params[p].data_mut()[i] = orig + H;
            let up = loss(params);
            params[p].data_mut()[i] = orig - H;
            let down = loss(params);
            params[p].data_mut()[i] = orig;
            g[i] = (up - down) / (2.0 * H);
        }
        out.push(g);
    }
    out
}

fn flat(v: &[Vec<f64>]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

fn check_classifier(spec: ArchitectureSpec) {
    for seed in 0..INSTANCES {
        let model = Classifier::build(spec.clone(), seed).unwrap();
        let xs = images(3, &spec.input_shape, 100 + seed);
        let refs: Vec<&Tensor> = xs.iter().collect();
        let ys: Vec<usize> = (0..3)
            .map(|i| (i + seed as usize) % spec.num_classes)
            .collect();
        let (_, analytic) = model.loss_and_grads(&refs, &ys).unwrap();
        let mut params = model.params().to_vec();
        let numeric = numeric_grads(&mut params, |ps| {
            let mut m = model.clone();
            m.params_mut().clone_from_slice(ps);
            m.loss_and_grads(&refs, &ys).unwrap().0
        });
        let err = relative_error(&flat(&analytic), &flat(&numeric));
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn mlp_gradients_match_finite_differences() {
    check_classifier(ArchitectureSpec::mlp(
        &[5, 4],
        Activation::Tanh,
        &[1, 4, 4],
        3,
    ));
}

#[test]
fn convnet_gradients_match_finite_differences() {
    let stages = [
        ConvStage {
            channels: 2,
            kernel: 3,
            stride: 1,
        },
        ConvStage {
            channels: 3,
            kernel: 3,
            stride: 2,
        },
    ];
    check_classifier(ArchitectureSpec::convnet(
        &stages,
        &[4],
        Activation::Tanh,
        &[1, 5, 5],
        3,
    ));
}

#[test]
fn autoencoder_gradients_match_finite_differences() {
    let spec = AeSpec {
        input_shape: vec![1, 3, 3],
        hidden: 5,
        bottleneck: 2,
        activation: Activation::Tanh,
    };
    for seed in 0..INSTANCES {
        let ae = DenoisingAutoencoder::build(spec.clone(), seed).unwrap();
        let clean = images(2, &spec.input_shape, 200 + seed);
        let noisy = images(2, &spec.input_shape, 300 + seed);
        let (c, n): (Vec<&Tensor>, Vec<&Tensor>) = (clean.iter().collect(), noisy.iter().collect());
        let (_, analytic) = ae.loss_and_grads(&n, &c).unwrap();
        let mut params = ae.params().to_vec();
        let numeric = numeric_grads(&mut params, |ps| {
            let mut m = ae.clone();
            m.params_mut().clone_from_slice(ps);
            m.loss_and_grads(&n, &c).unwrap().0
        });
        let err = relative_error(&flat(&analytic), &flat(&numeric));
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn vae_gradients_match_finite_differences() {
    let spec = VaeSpec {
        input_shape: vec![1, 3, 3],
        hidden: 5,
        latent_dim: 2,
        activation: Activation::Tanh,
    };
    for seed in 0..INSTANCES {
        let vae = VariationalAutoencoder::build(spec.clone(), seed).unwrap();
        let xs = images(2, &spec.input_shape, 400 + seed);
        let refs: Vec<&Tensor> = xs.iter().collect();
        let mut rng = seeded(500 + seed);
        let eta = Tensor::new(
            vec![2, 2],
            (0..4).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
        .unwrap();
        let (_, analytic) = vae.loss_and_grads(&refs, &eta, 0.7).unwrap();
        let mut params = vae.params().to_vec();
        let numeric = numeric_grads(&mut params, |ps| {
            let mut m = vae.clone();
            m.params_mut().clone_from_slice(ps);
            m.loss_and_grads(&refs, &eta, 0.7).unwrap().0
        });
        let err = relative_error(&flat(&analytic), &flat(&numeric));
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn lstm_gradients_match_finite_differences() {
    let spec = LstmSpec {
        input_dim: 3,
        hidden: 4,
    };
    for seed in 0..INSTANCES {
        let det = SequenceDetector::build(spec.clone(), seed).unwrap();
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
        let (_, analytic) = det.loss_and_grads(&refs, &labels).unwrap();
        let mut params = det.params().to_vec();
        let numeric = numeric_grads(&mut params, |ps| {
            let mut m = det.clone();
            m.params_mut().clone_from_slice(ps);
            m.loss_and_grads(&refs, &labels).unwrap().0
        });
        let err = relative_error(&flat(&analytic), &flat(&numeric));
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn mlp_separates_two_blobs() {
    let mut rng = seeded(9);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..200 {
        let c = i % 2;
        let centre = if c == 0 { 0.25 } else { 0.75 };
        let data = (0..2)
            .map(|_| centre + rng.random_range(-0.1..0.1))
            .collect();
        xs.push(Tensor::new(vec![1, 1, 2], data).unwrap());
        ys.push(c);
    }
    let mut m = Classifier::build(
        ArchitectureSpec::mlp(&[8], Activation::Relu, &[1, 1, 2], 2),
        1,
    )
    .unwrap();
    let cfg = TrainConfig::default().with_epochs(40).with_seed(2);
    let stats = m
        .train_supervised(dnd_core::models::Labeled::new(&xs, &ys), None, &cfg)
        .unwrap();
    assert!(stats.final_loss < stats.first_epoch_loss);
    assert!(stats.train_metric >= 0.99, "{}", stats.train_metric);
}

fn small_glyphs() -> (dnd_core::data::Dataset, dnd_core::data::Dataset) {
    // no pixel flips: those are unpredictable and would dominate the mse
    let cfg = DatasetConfig {
        n_train: 2500,
        n_test: 200,
        noise_p: 0.0,
        ..Default::default()
    };
    gen_synthetic_dataset(&cfg, 21).unwrap()
}

#[test]
fn denoiser_reduces_noise() {
    let (train, test) = small_glyphs();
    let spec = AeSpec {
        input_shape: vec![1, 12, 12],
        hidden: 64,
        bottleneck: 32,
        activation: Activation::Relu,
    };
    let mut ae = DenoisingAutoencoder::build(spec, 3).unwrap();
    let cfg = TrainConfig {
        lr: 2.0,
        ..TrainConfig::default().with_epochs(15).with_seed(4)
    };
    ae.train_denoising(&train.images, None, 0.2, &cfg).unwrap();
    let mut rng = seeded(5);
    let (mut before, mut after) = (0.0, 0.0);
    for x in &test.images {
        let noisy = dnd_core::models::add_gaussian_noise(x, 0.2, &mut rng);
        before += noisy.mse(x);
        after += ae.denoise(&noisy).unwrap().mse(x);
    }
    assert!(after < before, "denoised {after} vs noisy {before}");
}

#[test]
fn vae_trains_and_sampling_spreads_with_temperature() {
    let (train, test) = small_glyphs();
    let spec = VaeSpec {
        input_shape: vec![1, 12, 12],
        hidden: 64,
        latent_dim: 8,
        activation: Activation::Relu,
    };
    let mut vae = VariationalAutoencoder::build(spec, 6).unwrap();
    let cfg = TrainConfig {
        lr: 1.0,
        ..TrainConfig::default().with_epochs(15).with_seed(7)
    };
    let stats = vae.train(&train.images, 1.0 / 144.0, &cfg).unwrap();
    assert!(stats.final_loss < stats.first_epoch_loss);
    let x = &test.images[0];
    let (_, logvar) = vae.encode(x).unwrap();
    assert!(logvar
        .data()
        .iter()
        .all(|v| v.is_finite() && (-20.0..5.0).contains(v)));
    let mut spreads = Vec::new();
    for tau in [0.05, 0.1, 0.5] {
        let mut rng = seeded(8);
        let mut total = 0.0;
        for x in test.images.iter().take(20) {
            let a = vae.sample(x, tau, &mut rng).unwrap();
            let b = vae.sample(x, tau, &mut rng).unwrap();
            total += a.mse(&b);
        }
        spreads.push(total);
    }
    assert!(
        spreads[0] < spreads[1] && spreads[1] < spreads[2],
        "{spreads:?}"
    );
}

fn arb_classifier() -> impl Strategy<Value = Classifier> {
    (1usize..6, 1usize..4, any::<u64>(), prop::bool::ANY).prop_map(|(w, depth, seed, conv)| {
        let spec = if conv {
            let stage = ConvStage {
                channels: w,
                kernel: 3,
                stride: 2,
            };
            ArchitectureSpec::convnet(
                &[stage],
                &vec![w; depth - 1],
                Activation::Tanh,
                &[1, 5, 5],
                3,
            )
        } else {
            ArchitectureSpec::mlp(&vec![w; depth], Activation::Relu, &[1, 4, 3], 4)
        };
        Classifier::build(spec, seed).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_round_trip_is_exact(model in arb_classifier()) {
        let bytes = Checkpoint::Classifier(model.clone()).encode();
        let back = Checkpoint::decode(&bytes).unwrap().into_classifier().unwrap();
        prop_assert_eq!(back.params(), model.params());
        prop_assert_eq!(&back.spec, &model.spec);
        prop_assert_eq!(Checkpoint::Classifier(back).encode(), bytes);
    }
}

#[test]
fn checkpoint_files_round_trip_for_every_kind() {
    let dir = tempfile::tempdir().unwrap();
    let ae = DenoisingAutoencoder::build(
        AeSpec {
            input_shape: vec![1, 2, 2],
            hidden: 3,
            bottleneck: 2,
            activation: Activation::Sigmoid,
        },
        1,
    )
    .unwrap();
    let vae = VariationalAutoencoder::build(
        VaeSpec {
            input_shape: vec![1, 2, 2],
            hidden: 3,
            latent_dim: 2,
            activation: Activation::Tanh,
        },
        2,
    )
    .unwrap();
    let det = SequenceDetector::build(
        LstmSpec {
            input_dim: 5,
            hidden: 3,
        },
        3,
    )
    .unwrap();
    for (i, ck) in [
        Checkpoint::DenoisingAutoencoder(ae),
        Checkpoint::Vae(vae),
        Checkpoint::SequenceDetector(det),
    ]
    .into_iter()
    .enumerate()
    {
        let path = dir.path().join(format!("m{i}.dndw"));
        dnd_core::models::save_checkpoint(&path, &ck).unwrap();
        let back = dnd_core::models::load_checkpoint(&path).unwrap();
        assert_eq!(back.encode(), ck.encode());
    }
    let err = dnd_core::models::load_checkpoint(dir.path().join("missing")).unwrap_err();
    assert!(err.to_string().contains("missing"));
}
