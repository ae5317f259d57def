use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    batch_matrix, check_shape, collect_grads, dense, epoch_order, glorot, one_hot, seeded,
    set_grads, Labeled, TrainConfig, TrainStats,
};
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::tape::{Activation, LossKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Mlp,
    Convnet,
}

/// One convolution stage; padding is always `kernel / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvStage {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    /// Hidden layers of an MLP, or the dense head after the conv stages.
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub conv_stages: Vec<ConvStage>,
    pub activation: Activation,
    /// `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl ArchitectureSpec {
    pub fn mlp(
        hidden: &[usize],
        activation: Activation,
        input_shape: &[usize],
        num_classes: usize,
    ) -> Self {
        ArchitectureSpec {
            kind: ArchKind::Mlp,
            hidden_widths: hidden.to_vec(),
            conv_stages: Vec::new(),
            activation,
            input_shape: input_shape.to_vec(),
            num_classes,
        }
    }

    pub fn convnet(
        stages: &[ConvStage],
        head: &[usize],
        activation: Activation,
        input_shape: &[usize],
        num_classes: usize,
    ) -> Self {
        ArchitectureSpec {
            kind: ArchKind::Convnet,
            hidden_widths: head.to_vec(),
            conv_stages: stages.to_vec(),
            activation,
            input_shape: input_shape.to_vec(),
            num_classes,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.input_shape.len() != 3 || self.input_shape.iter().any(|&d| d == 0) {
            return fail(format!(
                "input_shape must be [c, h, w] with positive dims, got {:?}",
                self.input_shape
            ));
        }
        if self.num_classes < 2 {
            return fail(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return fail("hidden widths must be positive".into());
        }
        match self.kind {
            ArchKind::Mlp => {
                if self.hidden_widths.is_empty() {
                    return fail("mlp needs at least one hidden layer".into());
                }
                if !self.conv_stages.is_empty() {
                    return fail("mlp must not declare conv stages".into());
                }
            }
            ArchKind::Convnet => {
                if self.conv_stages.is_empty() {
                    return fail("convnet needs at least one conv stage".into());
                }
                let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
                for (i, s) in self.conv_stages.iter().enumerate() {
                    if s.channels == 0 || s.stride == 0 {
                        return fail(format!(
                            "conv stage {i}: channels and stride must be positive"
                        ));
                    }
                    if s.kernel % 2 == 0 {
                        return fail(format!("conv stage {i}: kernel {} must be odd", s.kernel));
                    }
                    if s.kernel > h.min(w) {
                        return fail(format!(
                            "conv stage {i}: kernel {} exceeds input side {}",
                            s.kernel,
                            h.min(w)
                        ));
                    }
                    let p = s.kernel / 2;
                    h = (h + 2 * p - s.kernel) / s.stride + 1;
                    w = (w + 2 * p - s.kernel) / s.stride + 1;
                }
            }
        }
        Ok(())
    }

    /// Shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut width = match self.kind {
            ArchKind::Mlp => self.input_len(),
            ArchKind::Convnet => {
                let (mut c, mut h, mut w) = (
                    self.input_shape[0],
                    self.input_shape[1],
                    self.input_shape[2],
                );
                for s in &self.conv_stages {
                    shapes.push(vec![s.channels, c, s.kernel, s.kernel]);
                    shapes.push(vec![s.channels]);
                    let p = s.kernel / 2;
                    h = (h + 2 * p - s.kernel) / s.stride + 1;
                    w = (w + 2 * p - s.kernel) / s.stride + 1;
                    c = s.channels;
                }
                c * h * w
            }
        };
        for &hw in &self.hidden_widths {
            shapes.push(vec![width, hw]);
            shapes.push(vec![hw]);
            width = hw;
        }
        shapes.push(vec![width, self.num_classes]);
        shapes.push(vec![self.num_classes]);
        shapes
    }

    /// Canonical JSON (sorted keys).
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self)
            .and_then(|v| serde_json::to_string(&v))
            .expect("spec serializes")
    }

    /// Stable 64-bit digest of the canonical JSON.
    pub fn spec_hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub spec: ArchitectureSpec,
    params: Vec<Tensor>,
    pub train_stats: Option<TrainStats>,
}

impl Classifier {
    /// Glorot-initialized weights and zero biases, deterministic in `seed`.
    pub fn build(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(seed);
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|s| match s.len() {
                1 => Tensor::zeros(&s),
                2 => glorot(&s, s[0], s[1], &mut rng),
                _ => {
                    let rf = s[2] * s[3];
                    glorot(&s, s[1] * rf, s[0] * rf, &mut rng)
                }
            })
            .collect();
        Ok(Classifier {
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

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    /// Records the forward pass for a `[batch, input_len]` matrix and
    /// returns the class-probability node plus the parameter nodes.
    pub(crate) fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p)).collect();
        let act = self.spec.activation;
        let batch = tape.shape(x)[0];
        let mut h = x;
        let mut pi = 0;
        if self.spec.kind == ArchKind::Convnet {
            let s = &self.spec.input_shape;
            h = tape.reshape(h, &[batch, s[0], s[1], s[2]])?;
            for stage in &self.spec.conv_stages {
                h = tape.conv2d(h, vars[pi], stage.stride, stage.kernel / 2)?;
                h = tape.channel_bias(h, vars[pi + 1])?;
                h = tape.activation(h, act);
                pi += 2;
            }
            let flat = tape.value(h).len() / batch;
            h = tape.reshape(h, &[batch, flat])?;
        }
        for _ in &self.spec.hidden_widths {
            h = dense(tape, h, vars[pi], vars[pi + 1], Some(act))?;
            pi += 2;
        }
        let logits = dense(tape, h, vars[pi], vars[pi + 1], None)?;
        Ok((tape.softmax(logits), vars))
    }

    /// Class-probability vector for one input.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor> {
        check_shape(&self.spec.input_shape, x)?;
        let mut tape = Tape::new();
        let xv = tape.input(Tensor::new(vec![1, x.len()], x.data().to_vec())?);
        let (probs, _) = self.forward(&mut tape, xv)?;
        Ok(Tensor::from_vec(tape.value(probs).data().to_vec()))
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(self.classify(x)?.argmax())
    }

    /// Probabilities for many inputs, evaluated in chunks.
    pub fn classify_batch(&self, xs: &[&Tensor]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(256) {
            for x in chunk {
                check_shape(&self.spec.input_shape, x)?;
            }
            let mut tape = Tape::new();
            let xv = tape.input(batch_matrix(chunk)?);
            let (probs, _) = self.forward(&mut tape, xv)?;
            let c = self.spec.num_classes;
            out.extend(
                tape.value(probs)
                    .data()
                    .chunks(c)
                    .map(|r| Tensor::from_vec(r.to_vec())),
            );
        }
        Ok(out)
    }

    pub fn predict_batch(&self, xs: &[&Tensor]) -> Result<Vec<usize>> {
        Ok(self
            .classify_batch(xs)?
            .iter()
            .map(Tensor::argmax)
            .collect())
    }

    pub fn accuracy(&self, data: Labeled<'_>) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let refs: Vec<&Tensor> = data.images.iter().collect();
        let preds = self.predict_batch(&refs)?;
        let hits = preds
            .iter()
            .zip(data.labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok(hits as f64 / data.len() as f64)
    }

    /// Mean cross-entropy over a batch and its gradient for every parameter.
    pub fn loss_and_grads(&self, xs: &[&Tensor], ys: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let xv = tape.input(batch_matrix(xs)?);
        let tv = tape.input(one_hot(ys, self.spec.num_classes));
        let (probs, vars) = self.forward(&mut tape, xv)?;
        let loss = tape.loss(probs, tv, LossKind::CrossEntropy)?;
        let grads = tape.backward(loss)?;
        Ok((
            tape.value(loss).item(),
            collect_grads(&self.params, &vars, grads),
        ))
    }

    /// Minibatch SGD on cross-entropy.
    pub fn train_supervised(
        &mut self,
        train: Labeled<'_>,
        test: Option<Labeled<'_>>,
        cfg: &TrainConfig,
    ) -> Result<TrainStats> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        let classes = self.spec.num_classes;
        if let Some(&bad) = train.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Validation(format!(
                "label {bad} >= num_classes {classes}"
            )));
        }
        let mut rng = seeded(cfg.seed);
        let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
        let mut losses = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            let order = epoch_order(train.len(), cfg.shuffle, &mut rng);
            let mut total = 0.0;
            for idx in order.chunks(cfg.batch_size) {
                let xs: Vec<&Tensor> = idx.iter().map(|&i| &train.images[i]).collect();
                let ys: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
                let (loss, grads) = self.loss_and_grads(&xs, &ys)?;
                set_grads(&mut self.params, grads);
                opt.step(&mut self.params)?;
                total += loss * idx.len() as f64;
            }
            losses.push(total / train.len() as f64);
        }
        let mut stats = TrainStats::from_losses(losses, cfg.seed);
        stats.train_metric = self.accuracy(train)?;
        stats.test_metric = test.map(|t| self.accuracy(t)).transpose()?;
        self.train_stats = Some(stats.clone());
        Ok(stats)
    }

    pub(crate) fn from_parts(spec: ArchitectureSpec, params: Vec<Tensor>) -> Result<Self> {
        let mut c = Classifier::build(spec, 0)?;
        super::write_params(&mut c.params, params)?;
        Ok(c)
    }
}
