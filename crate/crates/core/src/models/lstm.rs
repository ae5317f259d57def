//! Single-layer LSTM with a sigmoid readout of the final hidden state.

use serde::{Deserialize, Serialize};

use super::{collect_grads, epoch_order, glorot, seeded, set_grads, TrainConfig, TrainStats};
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::tape::{Activation, LossKind, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LstmSpec {
    pub input_dim: usize,
    pub hidden: usize,
}

/// Gate order used for parameter storage: input, forget, output, candidate.
const GATES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDetector {
    pub spec: LstmSpec,
    /// Per gate `[W_x (D×H), W_h (H×H), b (H)]`, then readout `w (H×1)`, `b (1)`.
    params: Vec<Tensor>,
    pub train_stats: Option<TrainStats>,
}

impl SequenceDetector {
    pub fn build(spec: LstmSpec, seed: u64) -> Result<Self> {
        if spec.input_dim == 0 || spec.hidden == 0 {
            return Err(Error::Validation("lstm dims must be positive".into()));
        }
        let mut rng = seeded(seed);
        let (d, h) = (spec.input_dim, spec.hidden);
        let mut params = Vec::with_capacity(GATES * 3 + 2);
        for _ in 0..GATES {
            params.push(glorot(&[d, h], d, h, &mut rng));
            params.push(glorot(&[h, h], h, h, &mut rng));
            params.push(Tensor::zeros(&[h]));
        }
        params.push(glorot(&[h, 1], h, 1, &mut rng));
        params.push(Tensor::zeros(&[1]));
        Ok(SequenceDetector {
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

    /// Records the recurrence for one sequence; returns the probability node.
    fn record(&self, tape: &mut Tape<'_>, v: &[Var], seq: &[Vec<f64>]) -> Result<Var> {
        let (d, hdim) = (self.spec.input_dim, self.spec.hidden);
        let mut h = tape.input(Tensor::zeros(&[1, hdim]));
        let mut c = tape.input(Tensor::zeros(&[1, hdim]));
        for step in seq {
            if step.len() != d {
                return Err(Error::dim("lstm_forward", &[d], &[step.len()]));
            }
            let x = tape.input(Tensor::new(vec![1, d], step.clone())?);
            let gate = |g: usize, act: Activation, tape: &mut Tape<'_>| -> Result<Var> {
                let a = tape.matmul(x, v[3 * g])?;
                let b = tape.matmul(h, v[3 * g + 1])?;
                let s = tape.add(a, b)?;
                let s = tape.add_bias(s, v[3 * g + 2])?;
                Ok(tape.activation(s, act))
            };
            let i = gate(0, Activation::Sigmoid, tape)?;
            let f = gate(1, Activation::Sigmoid, tape)?;
            let o = gate(2, Activation::Sigmoid, tape)?;
            let g = gate(3, Activation::Tanh, tape)?;
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let tc = tape.activation(c, Activation::Tanh);
            h = tape.mul(o, tc)?;
        }
        let r = tape.matmul(h, v[GATES * 3])?;
        let r = tape.add_bias(r, v[GATES * 3 + 1])?;
        Ok(tape.activation(r, Activation::Sigmoid))
    }

    /// Probability that the sequence is an attack.
    pub fn forward(&self, seq: &[Vec<f64>]) -> Result<f64> {
        if seq.is_empty() {
            return Err(Error::Contract(
                "lstm_forward needs a nonempty sequence".into(),
            ));
        }
        let mut tape = Tape::new();
        let v: Vec<Var> = self.params.iter().map(|p| tape.leaf(p)).collect();
        let p = self.record(&mut tape, &v, seq)?;
        Ok(tape.value(p).item())
    }

    /// Mean binary cross-entropy over the sequences and its gradient.
    pub fn loss_and_grads(
        &self,
        seqs: &[&[Vec<f64>]],
        labels: &[f64],
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Contract(
                "lstm training needs nonempty sequences".into(),
            ));
        }
        let mut tape = Tape::new();
        let v: Vec<Var> = self.params.iter().map(|p| tape.leaf(p)).collect();
        let mut total: Option<Var> = None;
        for (seq, &y) in seqs.iter().zip(labels) {
            let p = self.record(&mut tape, &v, seq)?;
            let t = tape.input(Tensor::new(vec![1, 1], vec![y])?);
            let l = tape.loss(p, t, LossKind::BinaryCrossEntropy)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, l)?,
                None => l,
            });
        }
        let loss = tape.scale(total.unwrap(), 1.0 / seqs.len() as f64);
        let grads = tape.backward(loss)?;
        Ok((
            tape.value(loss).item(),
            collect_grads(&self.params, &v, grads),
        ))
    }

    /// Supervised training on labelled feature sequences (1.0 = attack).
    pub fn train(
        &mut self,
        seqs: &[Vec<Vec<f64>>],
        labels: &[f64],
        cfg: &TrainConfig,
    ) -> Result<TrainStats> {
        cfg.validate()?;
        if seqs.is_empty() || seqs.len() != labels.len() {
            return Err(Error::Validation(
                "need one label per nonempty sequence set".into(),
            ));
        }
        let mut rng = seeded(cfg.seed);
        let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let order = epoch_order(seqs.len(), cfg.shuffle, &mut rng);
            let mut total = 0.0;
            for idx in order.chunks(cfg.batch_size) {
                let batch: Vec<&[Vec<f64>]> = idx.iter().map(|&i| seqs[i].as_slice()).collect();
                let ys: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
                let (loss, grads) = self.loss_and_grads(&batch, &ys)?;
                set_grads(&mut self.params, grads);
                opt.step(&mut self.params)?;
                total += loss * idx.len() as f64;
            }
            losses.push(total / seqs.len() as f64);
        }
        let mut stats = TrainStats::from_losses(losses, cfg.seed);
        let mut hits = 0;
        for (s, &y) in seqs.iter().zip(labels) {
            if (self.forward(s)? >= 0.5) == (y >= 0.5) {
                hits += 1;
            }
        }
        stats.train_metric = hits as f64 / seqs.len() as f64;
        self.train_stats = Some(stats.clone());
        Ok(stats)
    }

    pub(crate) fn from_parts(spec: LstmSpec, params: Vec<Tensor>) -> Result<Self> {
        let mut det = SequenceDetector::build(spec, 0)?;
        super::write_params(&mut det.params, params)?;
        Ok(det)
    }
}
