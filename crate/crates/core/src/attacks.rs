//! The adversary: sign-gradient attacks, black-box extraction and scripted
//! query sessions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{one_hot, ArchitectureSpec, Classifier, Labeled, TrainConfig};
use crate::tape::{LossKind, Tape};
use crate::tensor::Tensor;

/// A model whose input gradient is available to a white-box attacker.
pub trait WhiteBox {
    fn num_classes(&self) -> usize;

    /// Cross-entropy of the prediction against `label` and its gradient
    /// with respect to `x`.
    fn loss_and_input_gradient(&self, x: &Tensor, label: usize) -> Result<(f64, Tensor)>;
}

impl WhiteBox for Classifier {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn loss_and_input_gradient(&self, x: &Tensor, label: usize) -> Result<(f64, Tensor)> {
        if x.len() != self.spec.input_len() {
            return Err(Error::dim(
                "input_gradient",
                &self.spec.input_shape,
                x.shape(),
            ));
        }
        if label >= self.spec.num_classes {
            return Err(Error::Contract(format!("label {label} out of range")));
        }
        let row = Tensor::new(vec![1, x.len()], x.data().to_vec())?;
        let mut tape = Tape::new();
        let xv = tape.leaf(&row);
        let tv = tape.input(one_hot(&[label], self.spec.num_classes));
        let (probs, _) = self.forward(&mut tape, xv)?;
        let loss = tape.loss(probs, tv, LossKind::CrossEntropy)?;
        let grads = tape.backward(loss)?;
        let g = grads
            .get(xv)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()]);
        Ok((tape.value(loss).item(), Tensor::new(x.shape().to_vec(), g)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// L∞ budget in input units.
    pub epsilon: f64,
    /// Per-step size.
    pub alpha: f64,
    pub steps: usize,
    /// When set, descend toward this label instead of ascending the loss
    /// of the true label.
    #[serde(default)]
    pub target: Option<usize>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 0.15,
            alpha: 0.03,
            steps: 10,
            target: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.alpha && self.alpha <= self.epsilon && self.epsilon <= 1.0) {
            return Err(Error::Validation(format!(
                "need 0 <= alpha <= epsilon <= 1 (alpha {}, epsilon {})",
                self.alpha, self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::Validation("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// `∇ₓ cross_entropy(model(x), y)`.
pub fn input_gradient(model: &impl WhiteBox, x: &Tensor, y_true: usize) -> Result<Tensor> {
    Ok(model.loss_and_input_gradient(x, y_true)?.1)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `clamp01(x + epsilon·sign(∇ₓL))`.
pub fn fgsm(model: &impl WhiteBox, x: &Tensor, y_true: usize, epsilon: f64) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::Contract(format!("epsilon {epsilon} must be >= 0")));
    }
    let g = input_gradient(model, x, y_true)?;
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &d)| (v + epsilon * sign(d)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Every iterate of the basic iterative method, starting with `x` itself.
pub fn iterative_fgsm_path(
    model: &impl WhiteBox,
    x: &Tensor,
    y_true: usize,
    cfg: &AttackConfig,
) -> Result<Vec<Tensor>> {
    cfg.validate()?;
    let (label, direction) = match cfg.target {
        Some(t) => (t, -1.0),
        None => (y_true, 1.0),
    };
    let mut path = Vec::with_capacity(cfg.steps + 1);
    path.push(x.clone());
    let mut cur = x.clone();
    for _ in 0..cfg.steps {
        let g = input_gradient(model, &cur, label)?;
        let data = cur
            .data()
            .iter()
            .zip(g.data())
            .zip(x.data())
            .map(|((&c, &d), &x0)| {
                let stepped = c + direction * cfg.alpha * sign(d);
                stepped
                    .clamp(x0 - cfg.epsilon, x0 + cfg.epsilon)
                    .clamp(0.0, 1.0)
            })
            .collect();
        cur = Tensor::new(x.shape().to_vec(), data)?;
        path.push(cur.clone());
    }
    Ok(path)
}

/// Basic iterative method: repeated `alpha` sign steps projected onto the
/// `epsilon` ball and `[0, 1]`.
pub fn iterative_fgsm(
    model: &impl WhiteBox,
    x: &Tensor,
    y_true: usize,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    Ok(iterative_fgsm_path(model, x, y_true, cfg)?.pop().unwrap())
}

/// Inputs and the labels a target answered for them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueryLog {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl QueryLog {
    /// Queries `oracle` once per input and records its labels.
    pub fn harvest(
        inputs: &[Tensor],
        oracle: &mut dyn FnMut(&Tensor) -> Result<(usize, f64)>,
    ) -> Result<Self> {
        let mut log = QueryLog::default();
        for x in inputs {
            let (label, _) = oracle(x)?;
            log.inputs.push(x.clone());
            log.labels.push(label);
        }
        Ok(log)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Black-box extraction: fits `spec` to the labels a victim returned.
pub fn train_surrogate(
    log: &QueryLog,
    spec: &ArchitectureSpec,
    cfg: &TrainConfig,
) -> Result<Classifier> {
    if log.is_empty() {
        return Err(Error::Validation("query log is empty".into()));
    }
    if let Some(&bad) = log.labels.iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::Validation(format!(
            "logged label {bad} >= num_classes"
        )));
    }
    let mut model = Classifier::build(spec.clone(), cfg.seed)?;
    model.train_supervised(Labeled::new(&log.inputs, &log.labels), None, cfg)?;
    Ok(model)
}

/// Fraction of `(x_adv, y_true)` pairs that `target_infer` gets wrong.
pub fn attack_success_rate(
    mut target_infer: impl FnMut(&Tensor) -> Result<usize>,
    adv_pairs: &[(Tensor, usize)],
) -> Result<f64> {
    if adv_pairs.is_empty() {
        return Err(Error::Validation("no adversarial pairs to score".into()));
    }
    let mut fooled = 0usize;
    for (x, y) in adv_pairs {
        if target_infer(x)? != *y {
            fooled += 1;
        }
    }
    Ok(fooled as f64 / adv_pairs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Iterative FGSM against a local surrogate, querying the victim at
    /// every iterate.
    FgsmProbe,
    /// Single-pixel `±epsilon` probes around `x0` on a regular grid, the
    /// query pattern of finite-difference gradient estimation.
    ExtractionProbe,
    /// Independent inputs; the control class.
    Benign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: usize,
    pub kind: ProbeKind,
    pub label: usize,
    pub confidence: f64,
    pub shape: Vec<usize>,
    pub input: Vec<f64>,
}

impl TraceRecord {
    pub fn tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.input.clone())
    }
}

/// The ordered queries of one scripted session and the victim's answers.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackTrace {
    pub kind: ProbeKind,
    pub records: Vec<TraceRecord>,
}

impl AttackTrace {
    pub fn new(kind: ProbeKind) -> Self {
        AttackTrace {
            kind,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &Tensor, label: usize, confidence: f64) {
        self.records.push(TraceRecord {
            index: self.records.len(),
            kind: self.kind,
            label,
            confidence,
            shape: x.shape().to_vec(),
            input: x.data().to_vec(),
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn inputs(&self) -> Result<Vec<Tensor>> {
        self.records.iter().map(TraceRecord::tensor).collect()
    }

    /// One JSON object per record, LF terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let v = serde_json::to_value(r).expect("record serializes");
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records: Vec<TraceRecord> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        let kind = records
            .first()
            .map(|r| r.kind)
            .ok_or_else(|| Error::Format("empty trace".into()))?;
        for (i, r) in records.iter().enumerate() {
            if r.index != i {
                return Err(Error::Format(format!(
                    "trace index {} at position {i}",
                    r.index
                )));
            }
        }
        Ok(AttackTrace { kind, records })
    }
}

/// Regular grid of probe coordinates (every other row and column).
fn probe_grid(shape: &[usize]) -> Vec<usize> {
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut coords = Vec::new();
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            coords.push(y * w + x);
        }
    }
    coords
}

/// Runs one scripted attacker session against `victim` and returns the
/// trace of queries and answers (length `cfg.steps + 1`).
///
/// `x0` is queried first; for `FgsmProbe` the victim's answer on `x0`
/// becomes the label the surrogate attack ascends.
pub fn synth_attack_session(
    victim: &mut dyn FnMut(&Tensor) -> Result<(usize, f64)>,
    surrogate: &Classifier,
    x0: &Tensor,
    kind: ProbeKind,
    cfg: &AttackConfig,
) -> Result<AttackTrace> {
    cfg.validate()?;
    let mut trace = AttackTrace::new(kind);
    let (y0, c0) = victim(x0)?;
    trace.push(x0, y0, c0);
    match kind {
        ProbeKind::FgsmProbe => {
            let path = iterative_fgsm_path(surrogate, x0, y0, cfg)?;
            for x in &path[1..] {
                let (y, c) = victim(x)?;
                trace.push(x, y, c);
            }
        }
        ProbeKind::ExtractionProbe => {
            let grid = probe_grid(x0.shape());
            for i in 0..cfg.steps {
                let j = grid[i % grid.len()];
                let delta = if i % 2 == 0 {
                    cfg.epsilon
                } else {
                    -cfg.epsilon
                };
                let mut x = x0.clone();
                let v = x.data()[j];
                // push away from the boundary so the probe always moves
                let moved = if (0.0..=1.0).contains(&(v + delta)) {
                    v + delta
                } else {
                    v - delta
                };
                x.data_mut()[j] = moved.clamp(0.0, 1.0);
                let (y, c) = victim(&x)?;
                trace.push(&x, y, c);
            }
        }
        ProbeKind::Benign => {
            return Err(Error::Contract(
                "benign sessions are drawn from data, not synthesized".into(),
            ))
        }
    }
    Ok(trace)
}
