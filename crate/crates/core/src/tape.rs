//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves borrow their
//! tensors, so parameters are never copied just to be read. Node ids are
//! handed out in creation order, which makes the node list topologically
//! sorted; [`Tape::backward`] walks it once in reverse.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, Tensor};

/// Log guard used by the cross-entropy loss.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
    /// Mean of `−[t·ln(p+ε) + (1−t)·ln(1−p+ε)]` over elements.
    BinaryCrossEntropy,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    ChannelBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    Exp(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy(Var, Var),
    Mse(Var, Var),
    Bce(Var, Var),
    Conv2d(Var, Var, ConvGeom),
    Reshape(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, or zeros of length `len` when `v` was unreachable.
    pub fn take_or_zeros(&mut self, v: Var, len: usize) -> Vec<f64> {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| vec![0.0; len])
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a borrowed tensor as a leaf.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an owned tensor as a leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a vector to every row of the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let width = *x.shape().last().unwrap_or(&0);
        if b.len() != width || b.rank() != 1 {
            return Err(Error::dim("add_bias", x.shape(), b.shape()));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(width) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    /// Adds one bias per channel of a `[C,H,W]` or `[N,C,H,W]` tensor.
    pub fn channel_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let s = x.shape();
        let channels = if s.len() == 4 {
            s[1]
        } else if s.len() == 3 {
            s[0]
        } else {
            0
        };
        if b.len() != channels || b.rank() != 1 {
            return Err(Error::dim("channel_bias", s, b.shape()));
        }
        let plane = s[s.len() - 2] * s[s.len() - 1];
        let mut out = x.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let bv = b.data()[i % channels];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(out, Op::ChannelBias(a, bias)))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(op, x.shape(), y.shape()));
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let out = self.value(a).map(|v| kind.apply(v));
        self.push(out, Op::Act(a, kind))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = tensor::softmax(self.value(a));
        self.push(out, Op::Softmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Cross-entropy on probabilities (rows of the last axis) against a
    /// same-shape target, or mean squared error. Batched cross-entropy is
    /// averaged over rows.
    pub fn loss(&mut self, pred: Var, target: Var, kind: LossKind) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::dim("loss", p.shape(), t.shape()));
        }
        let out = match kind {
            LossKind::CrossEntropy => {
                let rows = ce_rows(p);
                let s: f64 = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&pv, &tv)| -tv * (pv + LOG_EPS).ln())
                    .sum();
                self.push(
                    Tensor::scalar(s / rows as f64),
                    Op::CrossEntropy(pred, target),
                )
            }
            LossKind::Mse => {
                let m = p.mse(t);
                self.push(Tensor::scalar(m), Op::Mse(pred, target))
            }
            LossKind::BinaryCrossEntropy => {
                let s: f64 = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&pv, &tv)| {
                        -(tv * (pv + LOG_EPS).ln() + (1.0 - tv) * (1.0 - pv + LOG_EPS).ln())
                    })
                    .sum();
                self.push(Tensor::scalar(s / p.len() as f64), Op::Bce(pred, target))
            }
        };
        Ok(out)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (x, k) = (self.value(input), self.value(kernels));
        let g = ConvGeom::new(x.shape(), k.shape(), stride, padding)?;
        let out = Tensor::new(g.out_shape(x.rank() == 4), g.forward(x.data(), k.data()))?;
        Ok(self.push(out, Op::Conv2d(input, kernels, g)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Populates gradients of `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            // leaf gradients stay in place; interior ones are consumed
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            match node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    accumulate(&mut grads, a, tensor::matmul_nt(&g, bv.data(), m, n, k));
                    accumulate(&mut grads, b, tensor::matmul_tn(av.data(), &g, m, k, n));
                }
                Op::AddBias(a, b) => {
                    let width = self.value(b).len();
                    let mut gb = vec![0.0; width];
                    for row in g.chunks(width) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, b, gb);
                    accumulate(&mut grads, a, g);
                }
                Op::ChannelBias(a, b) => {
                    let s = out.shape();
                    let plane = s[s.len() - 2] * s[s.len() - 1];
                    let channels = self.value(b).len();
                    let mut gb = vec![0.0; channels];
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        gb[i % channels] += chunk.iter().sum::<f64>();
                    }
                    accumulate(&mut grads, b, gb);
                    accumulate(&mut grads, a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, b, g.clone());
                    accumulate(&mut grads, a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, b, g.iter().map(|v| -v).collect());
                    accumulate(&mut grads, a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(a).data(), self.value(b).data());
                    let ga = g.iter().zip(bv).map(|(gv, y)| gv * y).collect();
                    let gb = g.iter().zip(av).map(|(gv, x)| gv * x).collect();
                    accumulate(&mut grads, a, ga);
                    accumulate(&mut grads, b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut grads, a, g.iter().map(|v| v * c).collect()),
                Op::AddScalar(a) | Op::Reshape(a) => accumulate(&mut grads, a, g),
                Op::Act(a, kind) => {
                    let x = self.value(a).data();
                    let ga = g
                        .iter()
                        .zip(x)
                        .zip(out.data())
                        .map(|((gv, &xv), &yv)| gv * kind.derivative(xv, yv))
                        .collect();
                    accumulate(&mut grads, a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect();
                    accumulate(&mut grads, a, ga);
                }
                Op::Softmax(a) => {
                    let width = *out.shape().last().unwrap_or(&1);
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), dst) in g
                        .chunks(width)
                        .zip(out.data().chunks(width))
                        .zip(ga.chunks_mut(width))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(yr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Sum(a) => {
                    let n = self.value(a).len();
                    accumulate(&mut grads, a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(a).len();
                    accumulate(&mut grads, a, vec![g[0] / n as f64; n]);
                }
                Op::CrossEntropy(p, t) => {
                    let (pv, tv) = (self.value(p), self.value(t));
                    let scale = g[0] / ce_rows(pv) as f64;
                    let gp = pv
                        .data()
                        .iter()
                        .zip(tv.data())
                        .map(|(&x, &y)| -scale * y / (x + LOG_EPS))
                        .collect();
                    let gt = pv
                        .data()
                        .iter()
                        .map(|&x| -scale * (x + LOG_EPS).ln())
                        .collect();
                    accumulate(&mut grads, p, gp);
                    accumulate(&mut grads, t, gt);
                }
                Op::Mse(p, t) => {
                    let (pv, tv) = (self.value(p).data(), self.value(t).data());
                    let scale = 2.0 * g[0] / pv.len() as f64;
                    let gp: Vec<f64> = pv.iter().zip(tv).map(|(x, y)| scale * (x - y)).collect();
                    let gt = gp.iter().map(|v| -v).collect();
                    accumulate(&mut grads, p, gp);
                    accumulate(&mut grads, t, gt);
                }
                Op::Bce(p, t) => {
                    let (pv, tv) = (self.value(p).data(), self.value(t).data());
                    let scale = g[0] / pv.len() as f64;
                    let gp = pv
                        .iter()
                        .zip(tv)
                        .map(|(&x, &y)| {
                            scale * (-y / (x + LOG_EPS) + (1.0 - y) / (1.0 - x + LOG_EPS))
                        })
                        .collect();
                    let gt = pv
                        .iter()
                        .map(|&x| scale * ((1.0 - x + LOG_EPS).ln() - (x + LOG_EPS).ln()))
                        .collect();
                    accumulate(&mut grads, p, gp);
                    accumulate(&mut grads, t, gt);
                }
                Op::Conv2d(x, k, geom) => {
                    let (gi, gk) = geom.backward(self.value(x).data(), self.value(k).data(), &g);
                    accumulate(&mut grads, x, gi);
                    accumulate(&mut grads, k, gk);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn ce_rows(p: &Tensor) -> usize {
    if p.rank() >= 2 {
        p.shape()[0]
    } else {
        1
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
