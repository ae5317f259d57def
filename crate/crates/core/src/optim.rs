//! Minibatch SGD with classical momentum.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::Validation(format!(
                "sgd needs lr > 0 and 0 <= momentum < 1 (lr {lr}, momentum {momentum})"
            )));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    /// `v ← momentum·v + grad; p ← p − lr·v`, then clears every grad.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(Error::Contract(format!("parameter {i} has no gradient")));
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let g = p.grad.take().expect("checked above");
            if g.len() != p.len() {
                return Err(Error::dim("sgd_step", p.shape(), &[g.len()]));
            }
            let lr = self.lr;
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vv = self.momentum * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// One momentum-SGD update with explicit, caller-owned velocity.
pub fn sgd_step(
    params: &mut [Tensor],
    velocity: &mut Vec<Vec<f64>>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let mut opt = Sgd::new(lr, momentum)?;
    opt.velocity = std::mem::take(velocity);
    let r = opt.step(params);
    *velocity = opt.velocity;
    r
}
