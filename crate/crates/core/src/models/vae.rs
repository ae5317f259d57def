use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::autoencoder::init_dense;
use super::{
    batch_matrix, check_shape, collect_grads, dense, epoch_order, seeded, set_grads, SeededRng,
    TrainConfig, TrainStats,
};
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::tape::{Activation, LossKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VaeSpec {
    pub input_shape: Vec<usize>,
    pub hidden: usize,
    pub latent_dim: usize,
    pub activation: Activation,
}

impl VaeSpec {
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (d, h, z) = (self.input_len(), self.hidden, self.latent_dim);
        vec![
            // encoder trunk, mean head, log-variance head
            vec![d, h],
            vec![h],
            vec![h, z],
            vec![z],
            vec![h, z],
            vec![z],
            // decoder
            vec![z, h],
            vec![h],
            vec![h, d],
            vec![d],
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariationalAutoencoder {
    pub spec: VaeSpec,
    params: Vec<Tensor>,
    pub train_stats: Option<TrainStats>,
}

/// Variables produced by one recorded VAE pass.
struct Pass {
    mu: Var,
    logvar: Var,
    recon: Var,
    params: Vec<Var>,
}

impl VariationalAutoencoder {
    pub fn build(spec: VaeSpec, seed: u64) -> Result<Self> {
        if spec.input_len() == 0 || spec.hidden == 0 || spec.latent_dim == 0 {
            return Err(Error::Validation("vae dims must be positive".into()));
        }
        let mut rng = seeded(seed);
        let params = init_dense(&spec.param_shapes(), &mut rng);
        Ok(VariationalAutoencoder {
            spec,
            params,
            train_stats: None,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }

    fn encode_vars(&self, tape: &mut Tape<'_>, v: &[Var], x: Var) -> Result<(Var, Var)> {
        let h = dense(tape, x, v[0], v[1], Some(self.spec.activation))?;
        let mu = dense(tape, h, v[2], v[3], None)?;
        let logvar = dense(tape, h, v[4], v[5], None)?;
        Ok((mu, logvar))
    }

    fn decode_vars(&self, tape: &mut Tape<'_>, v: &[Var], z: Var) -> Result<Var> {
        let h = dense(tape, z, v[6], v[7], Some(self.spec.activation))?;
        dense(tape, h, v[8], v[9], Some(Activation::Sigmoid))
    }

    /// Encodes, reparameterizes with the given standard-normal `eta`
    /// (`[batch, latent]`) and decodes.
    fn pass<'a>(&'a self, tape: &mut Tape<'a>, x: Var, eta: Var) -> Result<Pass> {
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p)).collect();
        let (mu, logvar) = self.encode_vars(tape, &params, x)?;
        let half = tape.scale(logvar, 0.5);
        let std = tape.exp(half);
        let noise = tape.mul(std, eta)?;
        let z = tape.add(mu, noise)?;
        let recon = self.decode_vars(tape, &params, z)?;
        Ok(Pass {
            mu,
            logvar,
            recon,
            params,
        })
    }

    /// Deterministic encoder pass: `(μ, logvar)`, each of length `latent_dim`.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        check_shape(&self.spec.input_shape, x)?;
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p)).collect();
        let xv = tape.input(Tensor::new(vec![1, x.len()], x.data().to_vec())?);
        let (mu, lv) = self.encode_vars(&mut tape, &params, xv)?;
        Ok((
            Tensor::from_vec(tape.value(mu).data().to_vec()),
            Tensor::from_vec(tape.value(lv).data().to_vec()),
        ))
    }

    /// Decodes a latent vector to an input-shaped tensor in `[0, 1]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.len() != self.spec.latent_dim {
            return Err(Error::dim("vae_decode", &[self.spec.latent_dim], z.shape()));
        }
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|p| tape.leaf(p)).collect();
        let zv = tape.input(Tensor::new(vec![1, z.len()], z.data().to_vec())?);
        let y = self.decode_vars(&mut tape, &params, zv)?;
        Tensor::new(self.spec.input_shape.clone(), tape.value(y).data().to_vec())
            .map(|t| t.clamp01())
    }

    /// `decode(μ + tau·exp(logvar/2)⊙η)` with `η ~ N(0, I)` drawn from `rng`.
    pub fn sample(&self, x: &Tensor, tau: f64, rng: &mut SeededRng) -> Result<Tensor> {
        let (mu, logvar) = self.encode(x)?;
        self.sample_from(&mu, &logvar, tau, rng)
    }

    /// Like [`Self::sample`] for an already encoded input.
    pub fn sample_from(
        &self,
        mu: &Tensor,
        logvar: &Tensor,
        tau: f64,
        rng: &mut SeededRng,
    ) -> Result<Tensor> {
        if !(tau >= 0.0) {
            return Err(Error::Contract(format!("tau {tau} must be >= 0")));
        }
        if tau == 0.0 {
            return self.decode(mu);
        }
        let z: Vec<f64> = mu
            .data()
            .iter()
            .zip(logvar.data())
            .map(|(&m, &lv)| {
                let eta: f64 = StandardNormal.sample(rng);
                m + tau * (lv / 2.0).exp() * eta
            })
            .collect();
        self.decode(&Tensor::from_vec(z))
    }

    /// Negative ELBO (`mse + beta·KL`) on a batch with fixed noise, plus
    /// gradients for every parameter.
    pub fn loss_and_grads(
        &self,
        xs: &[&Tensor],
        eta: &Tensor,
        beta: f64,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let xv = tape.input(batch_matrix(xs)?);
        let ev = tape.input(eta.clone());
        let pass = self.pass(&mut tape, xv, ev)?;
        let loss = elbo_on_tape(&mut tape, xv, &pass, beta, xs.len())?;
        let grads = tape.backward(loss)?;
        Ok((
            tape.value(loss).item(),
            collect_grads(&self.params, &pass.params, grads),
        ))
    }

    pub fn train(&mut self, images: &[Tensor], beta: f64, cfg: &TrainConfig) -> Result<TrainStats> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let z = self.spec.latent_dim;
        let mut rng = seeded(cfg.seed);
        let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let order = epoch_order(images.len(), cfg.shuffle, &mut rng);
            let mut total = 0.0;
            for idx in order.chunks(cfg.batch_size) {
                let xs: Vec<&Tensor> = idx.iter().map(|&i| &images[i]).collect();
                let eta_data = (0..idx.len() * z)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let eta = Tensor::new(vec![idx.len(), z], eta_data)?;
                let (loss, grads) = self.loss_and_grads(&xs, &eta, beta)?;
                set_grads(&mut self.params, grads);
                opt.step(&mut self.params)?;
                total += loss * idx.len() as f64;
            }
            losses.push(total / images.len() as f64);
        }
        let mut stats = TrainStats::from_losses(losses, cfg.seed);
        stats.train_metric = self.mean_reconstruction_mse(images)?;
        self.train_stats = Some(stats.clone());
        Ok(stats)
    }

    /// Mean mse between inputs and `decode(μ(x))`.
    pub fn mean_reconstruction_mse(&self, images: &[Tensor]) -> Result<f64> {
        let mut total = 0.0;
        for x in images {
            let (mu, _) = self.encode(x)?;
            total += x.mse(&self.decode(&mu)?);
        }
        Ok(total / images.len().max(1) as f64)
    }

    pub(crate) fn from_parts(spec: VaeSpec, params: Vec<Tensor>) -> Result<Self> {
        let mut vae = VariationalAutoencoder::build(spec, 0)?;
        super::write_params(&mut vae.params, params)?;
        Ok(vae)
    }
}

fn elbo_on_tape(tape: &mut Tape<'_>, x: Var, pass: &Pass, beta: f64, batch: usize) -> Result<Var> {
    let recon = tape.loss(pass.recon, x, LossKind::Mse)?;
    // KL(N(μ, σ²) ‖ N(0, 1)) = −½ Σ (1 + logvar − μ² − exp(logvar)), per batch row
    let one_plus = tape.add_scalar(pass.logvar, 1.0);
    let mu_sq = tape.mul(pass.mu, pass.mu)?;
    let var = tape.exp(pass.logvar);
    let t = tape.sub(one_plus, mu_sq)?;
    let t = tape.sub(t, var)?;
    let s = tape.sum(t);
    let kl = tape.scale(s, -0.5 * beta / batch as f64);
    tape.add(recon, kl)
}

/// `mse(x, x_recon) + beta·KL` with `KL = −½ Σ(1 + logvar − μ² − exp(logvar)) / batch`.
///
/// `mu` and `logvar` hold `batch` rows of the latent size; `x` and `x_recon`
/// hold the same number of rows of input size.
pub fn vae_loss(
    x: &Tensor,
    x_recon: &Tensor,
    mu: &Tensor,
    logvar: &Tensor,
    beta: f64,
    batch: usize,
) -> f64 {
    let kl: f64 = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
        * -0.5
        / batch.max(1) as f64;
    x.mse(x_recon) + beta * kl
}
