use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First-order optimizer with its running state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    adam: AdamParams,
    step: u64,
    moments: Option<(ParamSet, ParamSet)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            adam: AdamParams::default(),
            step: 0,
            moments: None,
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn with_adam_params(mut self, adam: AdamParams) -> Self {
        self.adam = adam;
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        params.check_layout(grads)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite { op: "optimizer_step" });
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.tensors_mut().zip(grads.tensors()) {
                    for (pi, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *pi -= self.lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (m, v) = self
                    .moments
                    .get_or_insert_with(|| (params.zeros_like(), params.zeros_like()));
                m.check_layout(params)?;
                let AdamParams { beta1, beta2, eps } = self.adam;
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                let tensors = params
                    .tensors_mut()
                    .zip(grads.tensors())
                    .zip(m.tensors_mut().zip(v.tensors_mut()));
                for ((p, g), (mt, vt)) in tensors {
                    let lanes = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(mt.data_mut().iter_mut().zip(vt.data_mut()));
                    for ((pi, &gi), (mi, vi)) in lanes {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *pi -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        if !params.is_finite() {
            return Err(Error::NonFinite { op: "optimizer_step" });
        }
        Ok(())
    }
}
