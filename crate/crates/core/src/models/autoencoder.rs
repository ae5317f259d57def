use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    batch_matrix, check_shape, collect_grads, dense, epoch_order, glorot, seeded, set_grads,
    SeededRng, TrainConfig, TrainStats,
};
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::tape::{Activation, LossKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AeSpec {
    pub input_shape: Vec<usize>,
    pub hidden: usize,
    pub bottleneck: usize,
    pub activation: Activation,
}

impl AeSpec {
    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len() == 0 || self.hidden == 0 || self.bottleneck == 0 {
            return Err(Error::Validation(
                "autoencoder dims must be positive".into(),
            ));
        }
        Ok(())
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        let (d, h, b) = (self.input_len(), self.hidden, self.bottleneck);
        vec![
            vec![d, h],
            vec![h],
            vec![h, b],
            vec![b],
            vec![b, h],
            vec![h],
            vec![h, d],
            vec![d],
        ]
    }
}

/// Dense encoder/decoder pair with a sigmoid output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoisingAutoencoder {
    pub spec: AeSpec,
    params: Vec<Tensor>,
    /// Standard deviation of the training corruption.
    pub noise_level: f64,
    pub train_stats: Option<TrainStats>,
}

impl DenoisingAutoencoder {
    pub fn build(spec: AeSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(seed);
        let params = init_dense(&spec.param_shapes(), &mut rng);
        Ok(DenoisingAutoencoder {
            spec,
            params,
            noise_level: 0.0,
            train_stats: None,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<(Var, Vec<Var>)> {
        let v: Vec<Var> = self.params.iter().map(|p| tape.leaf(p)).collect();
        let act = Some(self.spec.activation);
        let h = dense(tape, x, v[0], v[1], act)?;
        let z = dense(tape, h, v[2], v[3], act)?;
        let h = dense(tape, z, v[4], v[5], act)?;
        let y = dense(tape, h, v[6], v[7], Some(Activation::Sigmoid))?;
        Ok((y, v))
    }

    /// One encoder/decoder pass, clamped to `[0, 1]`.
    pub fn denoise(&self, x: &Tensor) -> Result<Tensor> {
        check_shape(&self.spec.input_shape, x)?;
        let mut out = self.denoise_batch(&[x])?;
        Ok(out.pop().unwrap())
    }

    pub fn denoise_batch(&self, xs: &[&Tensor]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(256) {
            let mut tape = Tape::new();
            let xv = tape.input(batch_matrix(chunk)?);
            let (y, _) = self.forward(&mut tape, xv)?;
            let d = self.spec.input_len();
            for row in tape.value(y).data().chunks(d) {
                let t = Tensor::new(self.spec.input_shape.clone(), row.to_vec())?;
                out.push(t.clamp01());
            }
        }
        Ok(out)
    }

    /// Reconstruction mse of `noisy → clean` and its parameter gradient.
    pub fn loss_and_grads(
        &self,
        noisy: &[&Tensor],
        clean: &[&Tensor],
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let xv = tape.input(batch_matrix(noisy)?);
        let tv = tape.input(batch_matrix(clean)?);
        let (y, vars) = self.forward(&mut tape, xv)?;
        let loss = tape.loss(y, tv, LossKind::Mse)?;
        let grads = tape.backward(loss)?;
        Ok((
            tape.value(loss).item(),
            collect_grads(&self.params, &vars, grads),
        ))
    }

    /// Mean reconstruction mse of clean inputs.
    pub fn reconstruction_mse(&self, images: &[Tensor]) -> Result<f64> {
        if images.is_empty() {
            return Ok(0.0);
        }
        let refs: Vec<&Tensor> = images.iter().collect();
        let recon = self.denoise_batch(&refs)?;
        Ok(images
            .iter()
            .zip(&recon)
            .map(|(a, b)| a.mse(b))
            .sum::<f64>()
            / images.len() as f64)
    }

    /// Trains `clamp01(x + N(0, noise_level²)) → x` under mse.
    pub fn train_denoising(
        &mut self,
        images: &[Tensor],
        test: Option<&[Tensor]>,
        noise_level: f64,
        cfg: &TrainConfig,
    ) -> Result<TrainStats> {
        cfg.validate()?;
        if images.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        if !(noise_level >= 0.0) {
            return Err(Error::Validation(format!(
                "noise level {noise_level} must be >= 0"
            )));
        }
        self.noise_level = noise_level;
        let mut rng = seeded(cfg.seed);
        let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let order = epoch_order(images.len(), cfg.shuffle, &mut rng);
            let mut total = 0.0;
            for idx in order.chunks(cfg.batch_size) {
                let clean: Vec<&Tensor> = idx.iter().map(|&i| &images[i]).collect();
                let noisy: Vec<Tensor> = clean
                    .iter()
                    .map(|x| add_gaussian_noise(x, noise_level, &mut rng))
                    .collect();
                let noisy_refs: Vec<&Tensor> = noisy.iter().collect();
                let (loss, grads) = self.loss_and_grads(&noisy_refs, &clean)?;
                set_grads(&mut self.params, grads);
                opt.step(&mut self.params)?;
                total += loss * idx.len() as f64;
            }
            losses.push(total / images.len() as f64);
        }
        let mut stats = TrainStats::from_losses(losses, cfg.seed);
        stats.train_metric = self.reconstruction_mse(images)?;
        stats.test_metric = test.map(|t| self.reconstruction_mse(t)).transpose()?;
        self.train_stats = Some(stats.clone());
        Ok(stats)
    }

    pub(crate) fn from_parts(spec: AeSpec, noise_level: f64, params: Vec<Tensor>) -> Result<Self> {
        let mut ae = DenoisingAutoencoder::build(spec, 0)?;
        super::write_params(&mut ae.params, params)?;
        ae.noise_level = noise_level;
        Ok(ae)
    }
}

/// `clamp01(x + N(0, sigma²))` elementwise.
pub fn add_gaussian_noise(x: &Tensor, sigma: f64, rng: &mut SeededRng) -> Tensor {
    if sigma == 0.0 {
        return x.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
    }
    out
}

pub(crate) fn init_dense(shapes: &[Vec<usize>], rng: &mut SeededRng) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|s| {
            if s.len() == 1 {
                Tensor::zeros(s)
            } else {
                glorot(s, s[0], s[1], rng)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> AeSpec {
        AeSpec {
            input_shape: vec![1, 4, 4],
            hidden: 8,
            bottleneck: 3,
            activation: Activation::Tanh,
        }
    }

    #[test]
    fn output_shape_and_range() {
        let ae = DenoisingAutoencoder::build(spec(), 1).unwrap();
        for v in [-5.0, 0.3, 7.0] {
            let y = ae.denoise(&Tensor::full(&[1, 4, 4], v)).unwrap();
            assert_eq!(y.shape(), &[1, 4, 4]);
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn denoise_is_pure() {
        let ae = DenoisingAutoencoder::build(spec(), 1).unwrap();
        let x = Tensor::full(&[1, 4, 4], 0.25);
        assert_eq!(ae.denoise(&x).unwrap(), ae.denoise(&x).unwrap());
    }

    #[test]
    fn shape_mismatch() {
        let ae = DenoisingAutoencoder::build(spec(), 1).unwrap();
        assert!(ae.denoise(&Tensor::zeros(&[5])).is_err());
    }

    #[test]
    fn rejects_empty_and_negative_noise() {
        let mut ae = DenoisingAutoencoder::build(spec(), 1).unwrap();
        let cfg = TrainConfig::default();
        assert!(ae.train_denoising(&[], None, 0.1, &cfg).is_err());
        let x = vec![Tensor::zeros(&[1, 4, 4])];
        assert!(ae.train_denoising(&x, None, -0.1, &cfg).is_err());
    }

    #[test]
    fn noise_is_clamped() {
        let mut rng = seeded(3);
        let x = Tensor::full(&[100], 0.5);
        let y = add_gaussian_noise(&x, 2.0, &mut rng);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(add_gaussian_noise(&x, 0.0, &mut rng), x);
    }
}
