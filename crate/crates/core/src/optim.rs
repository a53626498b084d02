//! Adam with decoupled weight decay.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array2, ParamMap};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Which named parameters an optimizer step may touch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FreezeMask {
    trainable: BTreeSet<String>,
}

impl FreezeMask {
    pub fn all_trainable(params: &ParamMap) -> Self {
        Self {
            trainable: params.keys().cloned().collect(),
        }
    }

    pub fn only(names: impl IntoIterator<Item = String>) -> Self {
        Self {
            trainable: names.into_iter().collect(),
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn freeze(&mut self, name: &str) {
        self.trainable.remove(name);
    }

    pub fn trainable(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(String::as_str)
    }
}

/// Optimizer state: step counter plus first and second moment estimates.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: ParamMap,
    pub v: ParamMap,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: ParamMap::new(),
            v: ParamMap::new(),
        }
    }

    /// One update of every trainable parameter that has a gradient.
    ///
    /// Decay is applied to the parameter directly (`p -= lr * wd * p`)
    /// before the adaptive step. Frozen parameters are never read or written.
    pub fn step(
        &mut self,
        params: &mut ParamMap,
        grads: &ParamMap,
        mask: &FreezeMask,
    ) -> Result<()> {
        for (name, g) in grads {
            if !mask.is_trainable(name) {
                continue;
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in `{name}` at flat index {i}"
                )));
            }
            let p = params
                .get(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam",
                    format!(
                        "`{name}` is {:?} but its gradient is {:?}",
                        p.shape(),
                        g.shape()
                    ),
                ));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (name, g) in grads {
            if !mask.is_trainable(name) {
                continue;
            }
            let p = params.get_mut(name).expect("checked above");
            let (rows, cols) = p.shape();
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(rows, cols));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(rows, cols));
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= lr * weight_decay * *pi;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
