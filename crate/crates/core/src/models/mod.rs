//! Model zoo: classifiers, a denoising autoencoder, a VAE and an LSTM
//! sequence detector, all trained with the tape in [`crate::tape`].

mod autoencoder;
pub mod checkpoint;
mod classifier;
mod lstm;
mod vae;

pub use autoencoder::{add_gaussian_noise, AeSpec, DenoisingAutoencoder};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ModelSpec};
pub use classifier::{ArchKind, ArchitectureSpec, Classifier, ConvStage};
pub use lstm::{LstmSpec, SequenceDetector, DEFAULT_HIDDEN as DEFAULT_LSTM_HIDDEN};
pub use vae::{vae_loss, VaeSpec, VariationalAutoencoder};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Activation, Gradients, Tape, Var};
use crate::tensor::Tensor;

/// The RNG used everywhere randomness must be reproducible from a seed.
pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Validation(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Validation(format!(
                "need lr > 0 and 0 <= momentum < 1 (lr {}, momentum {})",
                self.lr, self.momentum
            )));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub first_epoch_loss: f64,
    pub final_loss: f64,
    /// Accuracy for classifiers, reconstruction mse for autoencoders.
    pub train_metric: f64,
    pub test_metric: Option<f64>,
    pub epochs: usize,
    pub seed: u64,
    /// Set when the final epoch loss is not below the first epoch loss.
    pub loss_not_decreased: bool,
    pub epoch_losses: Vec<f64>,
}

impl TrainStats {
    fn from_losses(losses: Vec<f64>, seed: u64) -> Self {
        let first = losses[0];
        let last = *losses.last().unwrap();
        TrainStats {
            first_epoch_loss: first,
            final_loss: last,
            train_metric: 0.0,
            test_metric: None,
            epochs: losses.len(),
            seed,
            loss_not_decreased: !(last < first) && losses.len() > 1,
            epoch_losses: losses,
        }
    }
}

/// Borrowed images with their class labels.
#[derive(Clone, Copy, Debug)]
pub struct Labeled<'a> {
    pub images: &'a [Tensor],
    pub labels: &'a [usize],
}

impl<'a> Labeled<'a> {
    pub fn new(images: &'a [Tensor], labels: &'a [usize]) -> Self {
        assert_eq!(images.len(), labels.len());
        Labeled { images, labels }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Glorot-uniform weights in `±sqrt(6/(fan_in+fan_out))`.
pub(crate) fn glorot(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut SeededRng,
) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, limit, rng)
}

/// Stacks flattened inputs into a `[batch, dim]` matrix.
pub(crate) fn batch_matrix(items: &[&Tensor]) -> Result<Tensor> {
    let dim = items[0].len();
    let mut data = Vec::with_capacity(dim * items.len());
    for t in items {
        if t.len() != dim {
            return Err(Error::dim("batch", &[dim], t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(vec![items.len(), dim], data)
}

pub(crate) fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = 1.0;
    }
    t
}

/// `act(x·W + b)`, or the affine map alone when `act` is `None`.
pub(crate) fn dense(
    tape: &mut Tape<'_>,
    x: Var,
    w: Var,
    b: Var,
    act: Option<Activation>,
) -> Result<Var> {
    let z = tape.matmul(x, w)?;
    let z = tape.add_bias(z, b)?;
    Ok(match act {
        Some(a) => tape.activation(z, a),
        None => z,
    })
}

/// Gradients of `vars`, zero-filled where a parameter was unreachable.
pub(crate) fn collect_grads(
    params: &[Tensor],
    vars: &[Var],
    mut grads: Gradients,
) -> Vec<Vec<f64>> {
    params
        .iter()
        .zip(vars)
        .map(|(p, v)| grads.take_or_zeros(*v, p.len()))
        .collect()
}

pub(crate) fn set_grads(params: &mut [Tensor], grads: Vec<Vec<f64>>) {
    for (p, g) in params.iter_mut().zip(grads) {
        p.grad = Some(g);
    }
}

/// Epoch order for minibatching.
pub(crate) fn epoch_order(n: usize, shuffle: bool, rng: &mut SeededRng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        idx.shuffle(rng);
    }
    idx
}

pub(crate) fn check_shape(expected: &[usize], x: &Tensor) -> Result<()> {
    let n: usize = expected.iter().product();
    if x.len() != n {
        return Err(Error::dim("input", expected, x.shape()));
    }
    Ok(())
}

pub(crate) fn write_params(params: &mut [Tensor], values: Vec<Tensor>) -> Result<()> {
    if params.len() != values.len() {
        return Err(Error::Format(format!(
            "expected {} parameter tensors, found {}",
            params.len(),
            values.len()
        )));
    }
    for (p, v) in params.iter_mut().zip(values) {
        if p.shape() != v.shape() {
            return Err(Error::dim("checkpoint", p.shape(), v.shape()));
        }
        *p = v;
    }
    Ok(())
}
