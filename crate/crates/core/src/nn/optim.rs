use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First-order optimizer with loss-coupled L2 weight decay: the decay term
/// `wd * theta` is added to the gradient before the update rule.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    step: u64,
    moments: IndexMap<String, (Tensor, Tensor)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Optimizer { kind, lr, weight_decay, step: 0, moments: IndexMap::new() }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr, 0.0)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr, 0.0)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Returns the updated parameters.
    pub fn step(&mut self, params: &ParamSet, grads: &ParamSet) -> Result<ParamSet> {
        params.ensure_compatible(grads).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("gradients do not mirror parameters: {m}")),
            other => other,
        })?;
        self.step += 1;
        let mut out = params.clone();
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, theta), (_, g)) in out.iter_mut().zip(grads.iter()) {
                    for (t, &gv) in theta.data_mut().iter_mut().zip(g.data()) {
                        *t -= self.lr * (gv + self.weight_decay * *t);
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for ((name, theta), (_, g)) in out.iter_mut().zip(grads.iter()) {
                    let (m, v) = self
                        .moments
                        .entry(name.to_string())
                        .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
                    if m.shape() != g.shape() {
                        return Err(Error::config(format!("moment shape changed for {name}")));
                    }
                    for (((tv, &gv), mv), vv) in theta
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut())
                        .zip(v.data_mut().iter_mut())
                    {
                        let gd = gv + self.weight_decay * *tv;
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gd;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gd * gd;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *tv -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(out)
    }
}
